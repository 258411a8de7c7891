//! Constant turn rate and acceleration (CTRA) motion, rollouts and the
//! discrete control-action grid.
//!
//! The step is the exact integral of
//! `x' = v cos(theta)`, `y' = v sin(theta)`, `theta' = omega`, `v' = acc`
//! with the speed held at zero once it reaches zero (no reversing).

use alloc::vec::Vec;

use crate::math;

/// Yaw rates below this magnitude use the straight-line limit.
pub const STRAIGHT_YAW_RATE: f64 = 1e-6;

/// Heading increments below this use the series form of the integrals.
const SERIES_PHI: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("time step {0} outside (0, 1] s")]
    BadTimeStep(f64),
    #[error("rollout needs at least one action")]
    EmptyActions,
    #[error("bin index {index} out of range for a grid of {size} bins")]
    BinOutOfRange { index: usize, size: usize },
    #[error("invalid action grid: {0}")]
    BadGrid(&'static str),
}

/// Pose and speed of one agent at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
    /// Metres per second, never negative.
    pub speed: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: math::normalize_angle(heading),
            speed: speed.max(0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }

    pub fn distance_to(&self, other: &AgentState) -> f64 {
        math::hypot(self.x - other.x, self.y - other.y)
    }
}

/// Longitudinal acceleration and yaw rate held constant over one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ControlAction {
    pub acc: f64,
    pub yaw_rate: f64,
}

impl ControlAction {
    pub const ZERO: ControlAction = ControlAction { acc: 0.0, yaw_rate: 0.0 };

    pub fn new(acc: f64, yaw_rate: f64) -> Self {
        Self { acc, yaw_rate }
    }
}

/// Uniform joint grid over (acceleration, yaw rate).
///
/// Both axes have an odd bin count so the centre bin is exactly `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ActionGrid {
    pub acc_bins: usize,
    /// Half range of the acceleration axis, m/s^2.
    pub acc_max: f64,
    pub yaw_bins: usize,
    /// Half range of the yaw-rate axis, rad/s.
    pub yaw_max: f64,
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self {
            acc_bins: 13,
            acc_max: 6.0,
            yaw_bins: 13,
            yaw_max: 0.6,
        }
    }
}

impl ActionGrid {
    pub fn new(acc_bins: usize, acc_max: f64, yaw_bins: usize, yaw_max: f64) -> Result<Self, KinematicsError> {
        let grid = Self {
            acc_bins,
            acc_max,
            yaw_bins,
            yaw_max,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.acc_bins < 3 || self.acc_bins % 2 == 0 || self.yaw_bins < 3 || self.yaw_bins % 2 == 0 {
            return Err(KinematicsError::BadGrid("bin counts must be odd and at least 3"));
        }
        if !(self.acc_max > 0.0 && self.acc_max.is_finite() && self.yaw_max > 0.0 && self.yaw_max.is_finite()) {
            return Err(KinematicsError::BadGrid("ranges must be positive and finite"));
        }
        Ok(())
    }

    /// Joint bin count `d_a`.
    pub fn size(&self) -> usize {
        self.acc_bins * self.yaw_bins
    }

    pub fn center_index(&self) -> usize {
        (self.acc_bins / 2) * self.yaw_bins + self.yaw_bins / 2
    }

    pub fn acc_step(&self) -> f64 {
        self.acc_max / (self.acc_bins / 2) as f64
    }

    pub fn yaw_step(&self) -> f64 {
        self.yaw_max / (self.yaw_bins / 2) as f64
    }

    /// Centre of acceleration bin `i`.
    pub fn acc_center(&self, i: usize) -> f64 {
        axis_center(i, self.acc_bins, self.acc_max)
    }

    /// Centre of yaw-rate bin `j`.
    pub fn yaw_center(&self, j: usize) -> f64 {
        axis_center(j, self.yaw_bins, self.yaw_max)
    }

    /// Splits a joint index into `(acc_index, yaw_index)`.
    pub fn split(&self, index: usize) -> (usize, usize) {
        (index / self.yaw_bins, index % self.yaw_bins)
    }

    pub fn join(&self, acc_index: usize, yaw_index: usize) -> usize {
        acc_index * self.yaw_bins + yaw_index
    }

    /// Nearest bin after clamping into the grid range.
    pub fn quantize(&self, action: ControlAction) -> usize {
        let a = axis_index(action.acc, self.acc_bins, self.acc_max);
        let w = axis_index(action.yaw_rate, self.yaw_bins, self.yaw_max);
        self.join(a, w)
    }

    pub fn dequantize(&self, index: usize) -> Result<ControlAction, KinematicsError> {
        if index >= self.size() {
            return Err(KinematicsError::BinOutOfRange {
                index,
                size: self.size(),
            });
        }
        let (a, w) = self.split(index);
        Ok(ControlAction::new(self.acc_center(a), self.yaw_center(w)))
    }

    /// Clamps an action into the grid's range without snapping.
    pub fn clamp(&self, action: ControlAction) -> ControlAction {
        ControlAction::new(
            action.acc.clamp(-self.acc_max, self.acc_max),
            action.yaw_rate.clamp(-self.yaw_max, self.yaw_max),
        )
    }
}

fn axis_center(i: usize, bins: usize, half_range: f64) -> f64 {
    let c = (bins / 2) as f64;
    (i as f64 - c) / c * half_range
}

fn axis_index(value: f64, bins: usize, half_range: f64) -> usize {
    let c = (bins / 2) as f64;
    // Offset from the centre bin, in bin units.
    let u = value.clamp(-half_range, half_range) / half_range * c;
    let lo = math::floor(u);
    let frac = u - lo;
    let k = if frac > 0.5 {
        lo + 1.0
    } else if frac < 0.5 {
        lo
    } else if lo >= 0.0 {
        // Ties go toward the centre bin.
        lo
    } else {
        lo + 1.0
    };
    (k.clamp(-c, c) + c) as usize
}

/// A fixed-rate sequence of agent states.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, dt: f64) -> Self {
        Self { states, dt }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Heading-increment integrals of `exp(i*phi*s)` over `s in [0, 1]`.
///
/// Returns `(C1, S1, C2, S2)` with `C1 + i S1 = int e^{i phi s} ds` and
/// `C2 + i S2 = int s e^{i phi s} ds`.
fn turn_integrals(phi: f64) -> (f64, f64, f64, f64) {
    if math::abs(phi) < SERIES_PHI {
        let p2 = phi * phi;
        let p4 = p2 * p2;
        let p6 = p4 * p2;
        let c1 = 1.0 - p2 / 6.0 + p4 / 120.0 - p6 / 5040.0;
        let s1 = phi * (0.5 - p2 / 24.0 + p4 / 720.0 - p6 / 40320.0);
        let c2 = 0.5 - p2 / 8.0 + p4 / 144.0 - p6 / 5760.0;
        let s2 = phi * (1.0 / 3.0 - p2 / 30.0 + p4 / 840.0 - p6 / 45360.0);
        (c1, s1, c2, s2)
    } else {
        let (s, c) = (math::sin(phi), math::cos(phi));
        let p2 = phi * phi;
        let c1 = s / phi;
        let s1 = (1.0 - c) / phi;
        let c2 = (phi * s + c - 1.0) / p2;
        let s2 = (s - phi * c) / p2;
        (c1, s1, c2, s2)
    }
}

/// Displacement after moving for `t` seconds from heading `theta`.
fn displacement(theta: f64, speed: f64, acc: f64, yaw_rate: f64, t: f64) -> (f64, f64) {
    let phi = if math::abs(yaw_rate) < STRAIGHT_YAW_RATE { 0.0 } else { yaw_rate * t };
    let (c1, s1, c2, s2) = turn_integrals(phi);
    let (st, ct) = (math::sin(theta), math::cos(theta));
    let lin = speed * t;
    let quad = acc * t * t;
    let dx = lin * (ct * c1 - st * s1) + quad * (ct * c2 - st * s2);
    let dy = lin * (st * c1 + ct * s1) + quad * (st * c2 + ct * s2);
    (dx, dy)
}

/// One exact CTRA step.
pub fn ctra_step(state: &AgentState, action: ControlAction, dt: f64) -> Result<AgentState, KinematicsError> {
    if !state.is_finite() {
        return Err(KinematicsError::NonFinite("state"));
    }
    if !(action.acc.is_finite() && action.yaw_rate.is_finite()) {
        return Err(KinematicsError::NonFinite("action"));
    }
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(KinematicsError::BadTimeStep(dt));
    }
    let v0 = state.speed.max(0.0);
    let acc = action.acc;
    // Time spent moving before the speed hits zero.
    let (t_move, v1) = if acc < 0.0 && v0 + acc * dt < 0.0 {
        (-v0 / acc, 0.0)
    } else {
        (dt, (v0 + acc * dt).max(0.0))
    };
    let (dx, dy) = if t_move > 0.0 {
        displacement(state.heading, v0, acc, action.yaw_rate, t_move)
    } else {
        (0.0, 0.0)
    };
    let heading = if action.yaw_rate == 0.0 {
        state.heading
    } else {
        math::normalize_angle(state.heading + action.yaw_rate * dt)
    };
    Ok(AgentState {
        x: state.x + dx,
        y: state.y + dy,
        heading,
        speed: v1,
    })
}

/// Iterates [`ctra_step`]; the output holds `actions.len() + 1` states.
pub fn rollout(start: &AgentState, actions: &[ControlAction], dt: f64) -> Result<Trajectory, KinematicsError> {
    if actions.is_empty() {
        return Err(KinematicsError::EmptyActions);
    }
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(*start);
    let mut current = *start;
    for &a in actions {
        current = ctra_step(&current, a, dt)?;
        states.push(current);
    }
    Ok(Trajectory::new(states, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_straight_motion() {
        let s = ctra_step(&AgentState::new(0.0, 0.0, 0.0, 10.0), ControlAction::ZERO, 0.1).unwrap();
        assert!(close(s.x, 1.0, 1e-12) && s.y == 0.0 && s.heading == 0.0 && s.speed == 10.0);
    }

    #[test]
    fn constant_acceleration_from_rest() {
        let s = ctra_step(&AgentState::new(0.0, 0.0, 0.0, 0.0), ControlAction::new(2.0, 0.0), 0.1).unwrap();
        assert!(close(s.x, 0.01, 1e-15));
        assert!(close(s.speed, 0.2, 1e-15));
        assert_eq!(s.y, 0.0);
    }

    #[test]
    fn rest_with_zero_action_is_fixed() {
        let s0 = AgentState::new(3.0, -2.0, 1.0, 0.0);
        assert_eq!(ctra_step(&s0, ControlAction::ZERO, 0.1).unwrap(), s0);
    }

    #[test]
    fn braking_stops_and_holds() {
        let s0 = AgentState::new(0.0, 0.0, 0.0, 0.5);
        let s = ctra_step(&s0, ControlAction::new(-6.0, 0.0), 0.5).unwrap();
        assert_eq!(s.speed, 0.0);
        // Stops after 1/12 s having covered v^2 / (2|a|).
        assert!(close(s.x, 0.25 / 12.0, 1e-12));
    }

    #[test]
    fn quarter_circle_lands_on_the_circle() {
        // v = 1, omega = pi/2 over 1 s: radius 2/pi, centre (0, 2/pi).
        let r = 2.0 / PI;
        let s = ctra_step(&AgentState::new(0.0, 0.0, 0.0, 1.0), ControlAction::new(0.0, PI / 2.0), 1.0).unwrap();
        assert!(close(s.x, r, 1e-12) && close(s.y, r, 1e-12));
        assert!(close(s.heading, PI / 2.0, 1e-12));
    }

    #[test]
    fn tiny_yaw_rates_are_stable() {
        // Lateral offset to first order in omega: omega * (v dt^2 / 2 + a dt^3 / 3).
        let (v, a, w, dt) = (25.0, 3.0, 2e-6, 0.1);
        let s = ctra_step(&AgentState::new(0.0, 0.0, 0.0, v), ControlAction::new(a, w), dt).unwrap();
        let lateral = w * (v * dt * dt / 2.0 + a * dt * dt * dt / 3.0);
        assert!(close(s.y, lateral, 1e-15), "{} vs {}", s.y, lateral);
        assert!(close(s.x, v * dt + a * dt * dt / 2.0, 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        let s0 = AgentState::new(0.0, 0.0, 0.0, 1.0);
        assert!(matches!(ctra_step(&s0, ControlAction::ZERO, 0.0), Err(KinematicsError::BadTimeStep(_))));
        assert!(matches!(ctra_step(&s0, ControlAction::ZERO, 1.5), Err(KinematicsError::BadTimeStep(_))));
        assert!(matches!(
            ctra_step(&s0, ControlAction::new(f64::NAN, 0.0), 0.1),
            Err(KinematicsError::NonFinite(_))
        ));
        let bad = AgentState { x: f64::INFINITY, ..s0 };
        assert!(ctra_step(&bad, ControlAction::ZERO, 0.1).is_err());
    }

    #[test]
    fn rollout_straight_spacing() {
        let tr = rollout(&AgentState::new(0.0, 0.0, 0.0, 5.0), &[ControlAction::ZERO; 10], 0.1).unwrap();
        assert_eq!(tr.len(), 11);
        for (i, s) in tr.states.iter().enumerate() {
            assert!(close(s.x, 0.5 * i as f64, 1e-12));
        }
        assert_eq!(rollout(&tr.states[0], &[], 0.1), Err(KinematicsError::EmptyActions));
    }

    #[test]
    fn grid_center_and_corner() {
        let g = ActionGrid::default();
        assert_eq!(g.size(), 169);
        assert_eq!(g.quantize(ControlAction::ZERO), 84);
        assert_eq!(g.center_index(), 84);
        assert_eq!(g.dequantize(84).unwrap(), ControlAction::ZERO);
        assert_eq!(g.dequantize(0).unwrap(), ControlAction::new(-6.0, -0.6));
        assert_eq!(g.split(g.quantize(ControlAction::new(9.0, 0.0))), (12, 6));
        assert!(g.dequantize(169).is_err());
    }

    #[test]
    fn ties_round_toward_center() {
        let g = ActionGrid::default();
        assert_eq!(g.split(g.quantize(ControlAction::new(0.5, 0.0))).0, 6);
        assert_eq!(g.split(g.quantize(ControlAction::new(-0.5, 0.0))).0, 6);
        assert_eq!(g.split(g.quantize(ControlAction::new(2.5, 0.0))).0, 8);
        assert_eq!(g.split(g.quantize(ControlAction::new(-2.5, 0.0))).0, 4);
    }

    #[test]
    fn grid_rejects_even_counts() {
        assert!(ActionGrid::new(12, 6.0, 13, 0.6).is_err());
        assert!(ActionGrid::new(13, 0.0, 13, 0.6).is_err());
    }
}
