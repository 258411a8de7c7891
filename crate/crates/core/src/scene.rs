//! Multi-agent scenes: agent tracks sampled at a fixed frame rate plus the
//! road map they drive on.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{MapPolyline, Point2, RoadMap};
use crate::kinematics::{AgentState, Trajectory};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("scene has no agents")]
    NoAgents,
    #[error("frame rate must be positive and finite")]
    BadFrameRate,
    #[error("agent {0}: empty track")]
    EmptyTrack(u32),
    #[error("agent {agent}: track has {found} frames, expected {expected}")]
    TrackLength { agent: u32, found: usize, expected: usize },
    #[error("agent {agent}: track dt {found} does not match frame rate (dt {expected})")]
    TimeStep { agent: u32, found: f64, expected: f64 },
    #[error("agent {0}: extents must be positive")]
    BadExtents(u32),
    #[error("agent {agent}: non-finite state at frame {frame}")]
    NonFinite { agent: u32, frame: usize },
    #[error("duplicate agent id {0}")]
    DuplicateAgent(u32),
    #[error("unknown agent {0}")]
    UnknownAgent(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AgentKind {
    #[default]
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Vehicle, AgentKind::Pedestrian, AgentKind::Cyclist, AgentKind::Other];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Bounding box size in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Extents {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Extents {
    pub const CAR: Extents = Extents {
        length: 4.5,
        width: 1.9,
        height: 1.6,
    };

    fn is_valid(&self) -> bool {
        [self.length, self.width, self.height]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Agent {
    pub id: u32,
    pub kind: AgentKind,
    pub extents: Extents,
    pub track: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frame_rate_hz: f64,
    pub agents: Vec<Agent>,
    pub map: RoadMap,
}

impl Scene {
    /// Validates that all tracks share the frame rate and length.
    pub fn new(id: String, frame_rate_hz: f64, agents: Vec<Agent>, map: RoadMap) -> Result<Self, SceneError> {
        let scene = Self {
            id,
            frame_rate_hz,
            agents,
            map,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(SceneError::BadFrameRate);
        }
        let first = self.agents.first().ok_or(SceneError::NoAgents)?;
        let expected = first.track.len();
        let dt = self.dt();
        let mut seen = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            if seen.contains(&a.id) {
                return Err(SceneError::DuplicateAgent(a.id));
            }
            seen.push(a.id);
            if a.track.is_empty() {
                return Err(SceneError::EmptyTrack(a.id));
            }
            if a.track.len() != expected {
                return Err(SceneError::TrackLength {
                    agent: a.id,
                    found: a.track.len(),
                    expected,
                });
            }
            if math::abs(a.track.dt - dt) > 1e-9 {
                return Err(SceneError::TimeStep {
                    agent: a.id,
                    found: a.track.dt,
                    expected: dt,
                });
            }
            if !a.extents.is_valid() {
                return Err(SceneError::BadExtents(a.id));
            }
            if let Some(frame) = a.track.states.iter().position(|s| !s.is_finite()) {
                return Err(SceneError::NonFinite { agent: a.id, frame });
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    pub fn frame_count(&self) -> usize {
        self.agents.first().map_or(0, |a| a.track.len())
    }

    pub fn agent(&self, id: u32) -> Result<&Agent, SceneError> {
        self.agents.iter().find(|a| a.id == id).ok_or(SceneError::UnknownAgent(id))
    }

    /// Reflection across the x-axis; left and right trade places.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for a in &mut out.agents {
            for s in &mut a.track.states {
                *s = mirror_state(s);
            }
        }
        out.map = mirror_map(&self.map);
        out
    }

    /// Rotation by `angle` about the origin followed by a translation.
    pub fn transformed(&self, angle: f64, dx: f64, dy: f64) -> Self {
        let rigid = Rigid::new(angle, dx, dy);
        let mut out = self.clone();
        for a in &mut out.agents {
            for s in &mut a.track.states {
                *s = rigid.state(s);
            }
        }
        out.map = map_points(&self.map, |p| rigid.point(p));
        out
    }
}

pub(crate) fn mirror_state(s: &AgentState) -> AgentState {
    AgentState::new(s.x, -s.y, -s.heading, s.speed)
}

pub(crate) fn mirror_map(map: &RoadMap) -> RoadMap {
    let lines = map
        .polylines()
        .iter()
        .map(|l| {
            let mut l = l.clone();
            for p in &mut l.points {
                p.y = -p.y;
            }
            core::mem::swap(&mut l.left_neighbor, &mut l.right_neighbor);
            l
        })
        .collect();
    RoadMap::new(lines).expect("reflection keeps a valid map valid")
}

pub(crate) fn map_points(map: &RoadMap, f: impl Fn(Point2) -> Point2) -> RoadMap {
    let lines: Vec<MapPolyline> = map
        .polylines()
        .iter()
        .map(|l| {
            let mut l = l.clone();
            for p in &mut l.points {
                *p = f(*p);
            }
            l
        })
        .collect();
    RoadMap::new(lines).expect("rigid motion keeps a valid map valid")
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Rigid {
    angle: f64,
    cos: f64,
    sin: f64,
    dx: f64,
    dy: f64,
}

impl Rigid {
    pub(crate) fn new(angle: f64, dx: f64, dy: f64) -> Self {
        Self {
            angle,
            cos: math::cos(angle),
            sin: math::sin(angle),
            dx,
            dy,
        }
    }

    pub(crate) fn point(&self, p: Point2) -> Point2 {
        Point2::new(
            self.cos * p.x - self.sin * p.y + self.dx,
            self.sin * p.x + self.cos * p.y + self.dy,
        )
    }

    pub(crate) fn state(&self, s: &AgentState) -> AgentState {
        let p = self.point(Point2::from(s));
        AgentState::new(p.x, p.y, s.heading + self.angle, s.speed)
    }
}
