//! Frame-level meta-action labels from windowed kinematics and lane
//! topology.

use alloc::vec::Vec;
use core::fmt;

use crate::geometry::{
    self, count_binding_groups, curvature_at, heading_change_of, GeometryError, KinematicWindow, Point2, RoadMap,
};
use crate::kinematics::Trajectory;
use crate::math;

/// Curvature magnitude (1/m) below which a fitted value is numerical
/// residue rather than a turning direction.
pub const CURVATURE_ZERO: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("trajectory needs at least 2 states")]
    TooShort,
    #[error("frame {frame} outside trajectory of length {len}")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error("invalid thresholds: {0}")]
    BadThresholds(&'static str),
    #[error("unknown meta-action code {0:?}")]
    UnknownCode(alloc::string::String),
}

/// The eight frame-level driving decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MetaAction {
    #[cfg_attr(feature = "serde", serde(rename = "ST"))]
    Stationary,
    #[cfg_attr(feature = "serde", serde(rename = "KL"))]
    KeepLane,
    #[cfg_attr(feature = "serde", serde(rename = "LLC"))]
    LeftLaneChange,
    #[cfg_attr(feature = "serde", serde(rename = "RLC"))]
    RightLaneChange,
    #[cfg_attr(feature = "serde", serde(rename = "TL"))]
    TurnLeft,
    #[cfg_attr(feature = "serde", serde(rename = "RT"))]
    TurnRight,
    #[cfg_attr(feature = "serde", serde(rename = "LU"))]
    LeftUTurn,
    #[cfg_attr(feature = "serde", serde(rename = "RU"))]
    RightUTurn,
}

impl MetaAction {
    pub const COUNT: usize = 8;

    pub const ALL: [MetaAction; 8] = [
        MetaAction::Stationary,
        MetaAction::KeepLane,
        MetaAction::LeftLaneChange,
        MetaAction::RightLaneChange,
        MetaAction::TurnLeft,
        MetaAction::TurnRight,
        MetaAction::LeftUTurn,
        MetaAction::RightUTurn,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            MetaAction::Stationary => "ST",
            MetaAction::KeepLane => "KL",
            MetaAction::LeftLaneChange => "LLC",
            MetaAction::RightLaneChange => "RLC",
            MetaAction::TurnLeft => "TL",
            MetaAction::TurnRight => "RT",
            MetaAction::LeftUTurn => "LU",
            MetaAction::RightUTurn => "RU",
        }
    }

    pub fn from_code(code: &str) -> Result<Self, LabelError> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| LabelError::UnknownCode(code.into()))
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaAction::Stationary => "Stationary",
            MetaAction::KeepLane => "Keep Lane",
            MetaAction::LeftLaneChange => "Left Lane Change",
            MetaAction::RightLaneChange => "Right Lane Change",
            MetaAction::TurnLeft => "Turn Left",
            MetaAction::TurnRight => "Turn Right",
            MetaAction::LeftUTurn => "Left U-turn",
            MetaAction::RightUTurn => "Right U-turn",
        }
    }

    /// Left and right swapped, as seen in a mirror.
    pub fn mirrored(self) -> Self {
        match self {
            MetaAction::LeftLaneChange => MetaAction::RightLaneChange,
            MetaAction::RightLaneChange => MetaAction::LeftLaneChange,
            MetaAction::TurnLeft => MetaAction::TurnRight,
            MetaAction::TurnRight => MetaAction::TurnLeft,
            MetaAction::LeftUTurn => MetaAction::RightUTurn,
            MetaAction::RightUTurn => MetaAction::LeftUTurn,
            other => other,
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, MetaAction::LeftLaneChange | MetaAction::RightLaneChange)
    }

    /// `Some(true)` for left maneuvers, `Some(false)` for right ones.
    pub fn is_left(self) -> Option<bool> {
        match self {
            MetaAction::LeftLaneChange | MetaAction::TurnLeft | MetaAction::LeftUTurn => Some(true),
            MetaAction::RightLaneChange | MetaAction::TurnRight | MetaAction::RightUTurn => Some(false),
            _ => None,
        }
    }
}

impl fmt::Display for MetaAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LabelThresholds {
    /// m/s
    pub eps_v: f64,
    /// m per frame
    pub eps_s: f64,
    /// 1/m; also the band inside which curvature does not break a
    /// turn's sign constancy
    pub eps_kappa: f64,
    /// m
    pub eps_d: f64,
    /// m
    pub d_min: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    /// degrees
    pub theta_min: f64,
    /// degrees
    pub alpha_uturn: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            eps_v: 0.3,
            eps_s: 0.1,
            eps_kappa: 0.015,
            eps_d: 0.3,
            d_min: 1.75,
            kappa_min: 0.015,
            kappa_max: 0.25,
            theta_min: 15.0,
            alpha_uturn: 15.0,
        }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<(), LabelError> {
        let all = [
            self.eps_v,
            self.eps_s,
            self.eps_kappa,
            self.eps_d,
            self.d_min,
            self.kappa_min,
            self.kappa_max,
            self.theta_min,
            self.alpha_uturn,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(LabelError::BadThresholds("all thresholds must be positive"));
        }
        if self.kappa_min >= self.kappa_max {
            return Err(LabelError::BadThresholds("kappa_min must be below kappa_max"));
        }
        Ok(())
    }

    fn direction(&self, kappa: f64) -> i8 {
        if kappa <= -self.eps_kappa {
            -1
        } else if kappa >= self.eps_kappa {
            1
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LabelConfig {
    pub thresholds: LabelThresholds,
    /// Window half-width n in frames.
    pub half_width: usize,
    pub binding_gate: f64,
    /// Absorb single-frame label islands.
    pub smoothing: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            thresholds: LabelThresholds::default(),
            half_width: 10,
            binding_gate: geometry::DEFAULT_BINDING_GATE,
            smoothing: true,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        self.thresholds.validate()?;
        if self.half_width == 0 {
            return Err(LabelError::BadThresholds("half_width must be at least 1"));
        }
        if !(self.binding_gate > 0.0) {
            return Err(LabelError::BadThresholds("binding_gate must be positive"));
        }
        Ok(())
    }
}

/// Window statistics feeding the classification rules for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub mean_speed: f64,
    /// Mean displacement between consecutive window states.
    pub mean_step: f64,
    /// Curvature at the frame itself.
    pub kappa: f64,
    /// Curvature at every frame of the window.
    pub kappa_profile: Vec<f64>,
    /// Offset of the window's last point from the route of the lane the
    /// window started in.
    pub lateral_offset: f64,
    pub lane_changes: usize,
    /// Degrees, over the window widened to the surrounding run of
    /// same-direction curvature.
    pub heading_change: f64,
    pub truncated: bool,
}

/// Which rule produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LabelRule {
    Stationary,
    UTurn,
    Turn,
    LaneChange,
    KeepLane,
    Fallback,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLabel {
    pub action: MetaAction,
    pub rule: LabelRule,
}

/// Per-frame quantities shared by all windows of one track.
struct TrackAnalysis<'a> {
    traj: &'a Trajectory,
    map: &'a RoadMap,
    cfg: LabelConfig,
    kappa: Vec<f64>,
    binding: Vec<Option<u32>>,
}

impl<'a> TrackAnalysis<'a> {
    fn new(traj: &'a Trajectory, map: &'a RoadMap, cfg: &LabelConfig) -> Result<Self, LabelError> {
        cfg.validate()?;
        if traj.len() < 2 {
            return Err(LabelError::TooShort);
        }
        if !map.has_lanes() {
            return Err(GeometryError::NoLanes.into());
        }
        let n = cfg.half_width;
        let kappa = (0..traj.len())
            .map(|t| curvature_at(&KinematicWindow::around(&traj.states, t, n)).kappa)
            .collect();
        let binding = traj
            .states
            .iter()
            .map(|s| geometry::bind_to_lane(Point2::from(s), map, cfg.binding_gate).map(|b| b.map(|p| p.lane_id)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            traj,
            map,
            cfg: *cfg,
            kappa,
            binding,
        })
    }

    fn features(&self, t: usize) -> Result<FrameFeatures, LabelError> {
        let states = &self.traj.states;
        let n = self.cfg.half_width;
        let lo = t.saturating_sub(n);
        let hi = (t + n).min(states.len() - 1);
        let window = &states[lo..=hi];

        let mean_speed = window.iter().map(|s| s.speed).sum::<f64>() / window.len() as f64;
        let mean_step = if window.len() > 1 {
            window.windows(2).map(|w| w[0].distance_to(&w[1])).sum::<f64>() / (window.len() - 1) as f64
        } else {
            0.0
        };

        let bound: Vec<u32> = self.binding[lo..=hi].iter().flatten().copied().collect();
        let lane_changes = count_binding_groups(&bound, self.map).saturating_sub(1);
        let last = Point2::from(&states[hi]);
        let lateral_offset = match bound.first() {
            Some(&origin) => geometry::project_onto_route(last, self.map, origin)?.d,
            None => geometry::project_to_lane(last, self.map)?.d,
        };

        let th = &self.cfg.thresholds;
        let dir = th.direction(self.kappa[t]);
        let (mut a, mut b) = (lo, hi);
        if dir != 0 {
            let mut run_lo = t;
            while run_lo > 0 && th.direction(self.kappa[run_lo - 1]) == dir {
                run_lo -= 1;
            }
            let mut run_hi = t;
            while run_hi + 1 < states.len() && th.direction(self.kappa[run_hi + 1]) == dir {
                run_hi += 1;
            }
            a = a.min(run_lo);
            b = b.max(run_hi);
        }

        Ok(FrameFeatures {
            mean_speed,
            mean_step,
            kappa: self.kappa[t],
            kappa_profile: self.kappa[lo..=hi].to_vec(),
            lateral_offset,
            lane_changes,
            heading_change: heading_change_of(&states[a..=b]),
            truncated: hi - lo < 2 * n,
        })
    }
}

/// Features of frame `t` of `traj`.
pub fn windowed_features(
    traj: &Trajectory,
    map: &RoadMap,
    t: usize,
    cfg: &LabelConfig,
) -> Result<FrameFeatures, LabelError> {
    if t >= traj.len() {
        return Err(LabelError::FrameOutOfRange { frame: t, len: traj.len() });
    }
    TrackAnalysis::new(traj, map, cfg)?.features(t)
}

/// Applies the rules in precedence order
/// stationary, U-turn, turn, lane change, keep lane, fallback.
pub fn classify_frame(f: &FrameFeatures, th: &LabelThresholds) -> FrameLabel {
    let label = |action, rule| FrameLabel { action, rule };
    if f.mean_speed < th.eps_v || f.mean_step < th.eps_s {
        return label(MetaAction::Stationary, LabelRule::Stationary);
    }
    let has_left = f.kappa_profile.iter().any(|&k| th.direction(k) < 0);
    let has_right = f.kappa_profile.iter().any(|&k| th.direction(k) > 0);
    let one_direction = !(has_left && has_right);
    let left = f.kappa < 0.0;
    let abs_kappa = math::abs(f.kappa);

    if one_direction
        && abs_kappa > th.kappa_max
        && f.heading_change >= 180.0 - th.alpha_uturn
        && f.heading_change <= 180.0 + th.alpha_uturn
    {
        let a = if left { MetaAction::LeftUTurn } else { MetaAction::RightUTurn };
        return label(a, LabelRule::UTurn);
    }
    if one_direction && abs_kappa >= th.kappa_min && abs_kappa <= th.kappa_max && f.heading_change >= th.theta_min {
        let a = if left { MetaAction::TurnLeft } else { MetaAction::TurnRight };
        return label(a, LabelRule::Turn);
    }
    let sign_flip = f.kappa_profile.iter().any(|&k| k < -CURVATURE_ZERO)
        && f.kappa_profile.iter().any(|&k| k > CURVATURE_ZERO);
    if math::abs(f.lateral_offset) > th.d_min && f.lane_changes >= 1 && sign_flip {
        let a = if f.lateral_offset > 0.0 {
            MetaAction::LeftLaneChange
        } else {
            MetaAction::RightLaneChange
        };
        return label(a, LabelRule::LaneChange);
    }
    if abs_kappa < th.eps_kappa || math::abs(f.lateral_offset) < th.eps_d || f.lane_changes == 0 {
        return label(MetaAction::KeepLane, LabelRule::KeepLane);
    }
    label(MetaAction::KeepLane, LabelRule::Fallback)
}

/// One label per trajectory frame.
pub fn label_trajectory(traj: &Trajectory, map: &RoadMap, cfg: &LabelConfig) -> Result<Vec<FrameLabel>, LabelError> {
    let analysis = TrackAnalysis::new(traj, map, cfg)?;
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        out.push(classify_frame(&analysis.features(t)?, &cfg.thresholds));
    }
    if cfg.smoothing {
        let raw = out.clone();
        for t in 1..raw.len().saturating_sub(1) {
            if raw[t - 1].action == raw[t + 1].action && raw[t].action != raw[t - 1].action {
                out[t] = FrameLabel {
                    action: raw[t - 1].action,
                    rule: LabelRule::Smoothed,
                };
            }
        }
    }
    Ok(out)
}

/// Label actions only.
pub fn label_actions(traj: &Trajectory, map: &RoadMap, cfg: &LabelConfig) -> Result<Vec<MetaAction>, LabelError> {
    Ok(label_trajectory(traj, map, cfg)?.into_iter().map(|l| l.action).collect())
}

/// Frame agreement between two label sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelAgreement {
    pub agree: usize,
    pub total: usize,
    /// Disagreements farther than the window half-width from every
    /// transition of the reference sequence.
    pub far_mismatches: usize,
}

impl LabelAgreement {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.agree as f64 / self.total as f64
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            agree: self.agree + other.agree,
            total: self.total + other.total,
            far_mismatches: self.far_mismatches + other.far_mismatches,
        }
    }
}

/// Compares `labels` against `truth` over their common length.
pub fn compare_to_truth(labels: &[MetaAction], truth: &[MetaAction], half_width: usize) -> LabelAgreement {
    let len = labels.len().min(truth.len());
    let transitions: Vec<usize> = (1..len).filter(|&t| truth[t] != truth[t - 1]).collect();
    let mut out = LabelAgreement {
        total: len,
        ..Default::default()
    };
    for t in 0..len {
        if labels[t] == truth[t] {
            out.agree += 1;
        } else if !transitions.iter().any(|&b| t.abs_diff(b) <= half_width) {
            out.far_mismatches += 1;
        }
    }
    out
}
