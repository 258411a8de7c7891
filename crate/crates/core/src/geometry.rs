//! Lane-centerline projection, Frenet offsets and windowed trajectory
//! shape estimates (curvature, heading change, lane binding).

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::kinematics::AgentState;
use crate::math;

/// Points farther than this from every centerline are left unbound.
pub const DEFAULT_BINDING_GATE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("no lanes")]
    NoLanes,
    #[error("polyline {id}: {reason}")]
    BadPolyline { id: u32, reason: &'static str },
    #[error("polyline {id} references unknown polyline {target}")]
    DanglingReference { id: u32, target: u32 },
    #[error("duplicate polyline id {0}")]
    DuplicateId(u32),
    #[error("unknown lane {0}")]
    UnknownLane(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point2) -> f64 {
        math::hypot(self.x - other.x, self.y - other.y)
    }
}

impl From<&AgentState> for Point2 {
    fn from(s: &AgentState) -> Self {
        Point2::new(s.x, s.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PolylineKind {
    LaneCenter,
    LaneBoundary,
    StopLine,
    Other,
}

impl PolylineKind {
    pub const ALL: [PolylineKind; 4] = [
        PolylineKind::LaneCenter,
        PolylineKind::LaneBoundary,
        PolylineKind::StopLine,
        PolylineKind::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MapPolyline {
    pub id: u32,
    pub points: Vec<Point2>,
    pub kind: PolylineKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub left_neighbor: Option<u32>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub right_neighbor: Option<u32>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub successors: Vec<u32>,
}

impl MapPolyline {
    pub fn new(id: u32, kind: PolylineKind, points: Vec<Point2>) -> Self {
        Self {
            id,
            points,
            kind,
            left_neighbor: None,
            right_neighbor: None,
            successors: Vec::new(),
        }
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Point and unit direction at half the arclength.
    pub fn midpoint_frame(&self) -> (Point2, f64) {
        let half = self.length() / 2.0;
        let mut acc = 0.0;
        for w in self.points.windows(2) {
            let seg = w[0].distance(w[1]);
            if acc + seg >= half || seg == 0.0 {
                let t = if seg > 0.0 { ((half - acc) / seg).clamp(0.0, 1.0) } else { 0.0 };
                let p = Point2::new(w[0].x + t * (w[1].x - w[0].x), w[0].y + t * (w[1].y - w[0].y));
                return (p, math::atan2(w[1].y - w[0].y, w[1].x - w[0].x));
            }
            acc += seg;
        }
        let n = self.points.len();
        let (a, b) = (self.points[n - 2], self.points[n - 1]);
        (b, math::atan2(b.y - a.y, b.x - a.x))
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.points.len() < 2 {
            return Err(GeometryError::BadPolyline {
                id: self.id,
                reason: "fewer than 2 points",
            });
        }
        if self.points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(GeometryError::BadPolyline {
                id: self.id,
                reason: "non-finite point",
            });
        }
        if self.points.windows(2).any(|w| w[0] == w[1]) {
            return Err(GeometryError::BadPolyline {
                id: self.id,
                reason: "repeated consecutive point",
            });
        }
        Ok(())
    }
}

/// A validated set of polylines with resolvable topology.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<MapPolyline>", into = "Vec<MapPolyline>"))]
pub struct RoadMap {
    polylines: Vec<MapPolyline>,
}

impl TryFrom<Vec<MapPolyline>> for RoadMap {
    type Error = GeometryError;

    fn try_from(value: Vec<MapPolyline>) -> Result<Self, Self::Error> {
        RoadMap::new(value)
    }
}

impl From<RoadMap> for Vec<MapPolyline> {
    fn from(map: RoadMap) -> Self {
        map.polylines
    }
}

impl RoadMap {
    pub fn new(polylines: Vec<MapPolyline>) -> Result<Self, GeometryError> {
        let mut ids = BTreeMap::new();
        for (i, p) in polylines.iter().enumerate() {
            p.validate()?;
            if ids.insert(p.id, i).is_some() {
                return Err(GeometryError::DuplicateId(p.id));
            }
        }
        for p in &polylines {
            let refs = p.left_neighbor.iter().chain(p.right_neighbor.iter()).chain(p.successors.iter());
            for &target in refs {
                if !ids.contains_key(&target) {
                    return Err(GeometryError::DanglingReference { id: p.id, target });
                }
            }
        }
        Ok(Self { polylines })
    }

    pub fn polylines(&self) -> &[MapPolyline] {
        &self.polylines
    }

    pub fn get(&self, id: u32) -> Option<&MapPolyline> {
        self.polylines.iter().find(|p| p.id == id)
    }

    pub fn lanes(&self) -> impl Iterator<Item = &MapPolyline> {
        self.polylines.iter().filter(|p| p.kind == PolylineKind::LaneCenter)
    }

    pub fn has_lanes(&self) -> bool {
        self.lanes().next().is_some()
    }

    pub fn is_successor(&self, from: u32, to: u32) -> bool {
        self.get(from).is_some_and(|p| p.successors.contains(&to))
    }

    /// Lane ids reachable from `id` through successor links, `id` included.
    pub fn route_from(&self, id: u32) -> Vec<u32> {
        let mut out = alloc::vec![id];
        let mut i = 0;
        while i < out.len() {
            if let Some(p) = self.get(out[i]) {
                for &s in &p.successors {
                    if !out.contains(&s) {
                        out.push(s);
                    }
                }
            }
            i += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetProjection {
    pub lane_id: u32,
    /// Arclength along the lane.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the lane direction.
    pub d: f64,
    pub segment_index: usize,
}

/// Projects onto one polyline; first segment wins among equal distances.
pub fn project_onto(point: Point2, line: &MapPolyline) -> FrenetProjection {
    let mut best: Option<(f64, FrenetProjection)> = None;
    let mut arclength = 0.0;
    for (i, w) in line.points.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let len2 = ex * ex + ey * ey;
        let len = math::sqrt(len2);
        let t = (((point.x - a.x) * ex + (point.y - a.y) * ey) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (a.x + t * ex, a.y + t * ey);
        let (rx, ry) = (point.x - qx, point.y - qy);
        let dist = math::hypot(rx, ry);
        let cross = ex * ry - ey * rx;
        let d = if cross < 0.0 { -dist } else { dist };
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((
                dist,
                FrenetProjection {
                    lane_id: line.id,
                    s: arclength + t * len,
                    d,
                    segment_index: i,
                },
            ));
        }
        arclength += len;
    }
    // validated polylines always have a segment
    best.map(|(_, p)| p).expect("polyline with at least one segment")
}

/// Nearest lane-centerline projection; ties go to the smaller lane id.
pub fn project_to_lane(point: Point2, map: &RoadMap) -> Result<FrenetProjection, GeometryError> {
    project_among(point, map.lanes())
}

fn project_among<'a>(
    point: Point2,
    lanes: impl Iterator<Item = &'a MapPolyline>,
) -> Result<FrenetProjection, GeometryError> {
    let mut best: Option<FrenetProjection> = None;
    for lane in lanes {
        let p = project_onto(point, lane);
        let better = match &best {
            None => true,
            Some(b) => {
                let (da, db) = (math::abs(p.d), math::abs(b.d));
                da < db || (da == db && p.lane_id < b.lane_id)
            }
        };
        if better {
            best = Some(p);
        }
    }
    best.ok_or(GeometryError::NoLanes)
}

/// Projection restricted to `lane_id` and the lanes reachable from it.
pub fn project_onto_route(point: Point2, map: &RoadMap, lane_id: u32) -> Result<FrenetProjection, GeometryError> {
    if map.get(lane_id).is_none() {
        return Err(GeometryError::UnknownLane(lane_id));
    }
    let route = map.route_from(lane_id);
    project_among(point, map.lanes().filter(|l| route.contains(&l.id)))
}

/// Lane binding of a point, `None` when farther than `gate` from every lane.
pub fn bind_to_lane(point: Point2, map: &RoadMap, gate: f64) -> Result<Option<FrenetProjection>, GeometryError> {
    let p = project_to_lane(point, map)?;
    Ok((math::abs(p.d) <= gate).then_some(p))
}

/// Slice of a track centred on one frame, truncated at the track ends.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicWindow {
    pub half_width: usize,
    pub states: Vec<AgentState>,
    /// Index of the centre frame within `states`.
    pub center: usize,
    pub truncated: bool,
}

impl KinematicWindow {
    pub fn around(track: &[AgentState], t: usize, n: usize) -> Self {
        let lo = t.saturating_sub(n);
        let hi = (t + n).min(track.len().saturating_sub(1));
        Self {
            half_width: n,
            states: track[lo..=hi].to_vec(),
            center: t - lo,
            truncated: hi - lo < 2 * n,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureEstimate {
    /// Signed curvature, negative for left (counter-clockwise) turns.
    pub kappa: f64,
    pub degenerate: bool,
}

/// Curvature at the window centre from a least-squares cubic fit of
/// `x(u)`, `y(u)` with `u` the scaled frame offset.
pub fn curvature_at(window: &KinematicWindow) -> CurvatureEstimate {
    const DEGENERATE: CurvatureEstimate = CurvatureEstimate {
        kappa: 0.0,
        degenerate: true,
    };
    if window.len() < 4 {
        return DEGENERATE;
    }
    let scale = window.half_width.max(1) as f64;
    let us: Vec<f64> = (0..window.len())
        .map(|i| (i as f64 - window.center as f64) / scale)
        .collect();
    let origin = window.states[window.center];
    let xs: Vec<f64> = window.states.iter().map(|s| s.x - origin.x).collect();
    let ys: Vec<f64> = window.states.iter().map(|s| s.y - origin.y).collect();
    let (Some(cx), Some(cy)) = (fit_cubic(&us, &xs), fit_cubic(&us, &ys)) else {
        return DEGENERATE;
    };
    let (dx, ddx) = (cx[1], 2.0 * cx[2]);
    let (dy, ddy) = (cy[1], 2.0 * cy[2]);
    let speed2 = dx * dx + dy * dy;
    let extent = window
        .states
        .iter()
        .map(|s| Point2::from(s).distance(Point2::from(&window.states[0])))
        .fold(0.0, f64::max);
    if extent == 0.0 || speed2 <= 1e-18 {
        return DEGENERATE;
    }
    let kappa = (dx * ddy - dy * ddx) / (speed2 * math::sqrt(speed2));
    CurvatureEstimate {
        kappa: -kappa,
        degenerate: false,
    }
}

/// Cubic least squares via the 4x4 normal equations.
fn fit_cubic(us: &[f64], vs: &[f64]) -> Option<[f64; 4]> {
    let mut a = [[0.0f64; 5]; 4];
    for (&u, &v) in us.iter().zip(vs) {
        let pw = [1.0, u, u * u, u * u * u];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += pw[r] * pw[c];
            }
            a[r][4] += pw[r] * v;
        }
    }
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| math::abs(a[i][col]).total_cmp(&math::abs(a[j][col])))?;
        if math::abs(a[pivot][col]) < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..5 {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let mut s = a[r][4];
        for c in r + 1..4 {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    Some(x)
}

/// Total unwrapped heading change across the window, in degrees.
pub fn heading_change(window: &KinematicWindow) -> f64 {
    heading_change_of(&window.states)
}

pub(crate) fn heading_change_of(states: &[AgentState]) -> f64 {
    let total: f64 = states
        .windows(2)
        .map(|w| math::normalize_angle(w[1].heading - w[0].heading))
        .sum();
    math::abs(math::to_degrees(total))
}

/// Number of lane bindings in the window beyond the first; moving into a
/// successor lane continues the same binding.
pub fn lane_binding_changes(window: &KinematicWindow, map: &RoadMap, gate: f64) -> Result<usize, GeometryError> {
    let mut bound = Vec::with_capacity(window.len());
    for s in &window.states {
        if let Some(p) = bind_to_lane(Point2::from(s), map, gate)? {
            bound.push(p.lane_id);
        }
    }
    Ok(count_binding_groups(&bound, map).saturating_sub(1))
}

/// Distinct lane ids in `seq`, merging ids joined by an observed
/// successor transition.
pub(crate) fn count_binding_groups(seq: &[u32], map: &RoadMap) -> usize {
    let mut ids: Vec<u32> = Vec::new();
    for &id in seq {
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for w in seq.windows(2) {
        if w[0] != w[1] && (map.is_successor(w[0], w[1]) || map.is_successor(w[1], w[0])) {
            let a = ids.iter().position(|&x| x == w[0]).unwrap_or(0);
            let b = ids.iter().position(|&x| x == w[1]).unwrap_or(0);
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
    }
    (0..ids.len()).filter(|&i| find(&mut parent, i) == i).count()
}
