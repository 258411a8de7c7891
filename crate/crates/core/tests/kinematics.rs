mod common;

use common::{angle_diff, euler_oracle, rk4_oracle, random_case, rng};
use metaction_core::kinematics::{ctra_step, rollout, ActionGrid, AgentState, ControlAction};
use proptest::prelude::*;

#[test]
fn step_matches_substepped_oracle() {
    let grid = ActionGrid::default();
    let mut r = rng(1);
    for _ in 0..2000 {
        let (s, a) = random_case(&mut r, &grid);
        let got = ctra_step(&s, a, 0.1).unwrap();
        let want = rk4_oracle(&s, a, 0.1, 1000);
        let pos = ((got.x - want.x).powi(2) + (got.y - want.y).powi(2)).sqrt();
        assert!(pos <= 1e-6, "{s:?} {a:?}: position error {pos}");
        assert!(angle_diff(got.heading, want.heading) <= 1e-6);
        assert!((got.speed - want.speed).abs() <= 1e-6);
    }
}

#[test]
fn plain_euler_agrees_at_its_own_accuracy() {
    let s = AgentState::new(0.0, 0.0, 0.0, 8.0);
    let a = ControlAction::new(1.5, 0.4);
    let got = ctra_step(&s, a, 0.1).unwrap();
    let euler = euler_oracle(&s, a, 0.1, 1000);
    let pos = ((got.x - euler.x).powi(2) + (got.y - euler.y).powi(2)).sqrt();
    assert!(pos < 1e-4, "{pos}");
    assert!(angle_diff(got.heading, euler.heading) < 1e-9);
}

#[test]
fn half_steps_compose_to_a_full_step() {
    let grid = ActionGrid::default();
    let mut r = rng(2);
    for _ in 0..2000 {
        let (s, a) = random_case(&mut r, &grid);
        let full = ctra_step(&s, a, 0.1).unwrap();
        let half = ctra_step(&ctra_step(&s, a, 0.05).unwrap(), a, 0.05).unwrap();
        assert!((full.x - half.x).abs() < 1e-9 && (full.y - half.y).abs() < 1e-9);
        assert!(angle_diff(full.heading, half.heading) < 1e-9);
        assert!((full.speed - half.speed).abs() < 1e-9);
    }
}

#[test]
fn rest_with_zero_action_is_fixed() {
    let s = AgentState::new(3.0, -2.0, 1.0, 0.0);
    assert_eq!(ctra_step(&s, ControlAction::ZERO, 0.1).unwrap(), s);
}

#[test]
fn rollout_is_a_fold_of_steps() {
    let grid = ActionGrid::default();
    let mut r = rng(3);
    let actions = common::random_bin_actions(&mut r, &grid, 50);
    let start = AgentState::new(1.0, 2.0, 0.3, 7.0);
    let traj = rollout(&start, &actions, 0.1).unwrap();
    let folded = actions.iter().fold(start, |s, &a| ctra_step(&s, a, 0.1).unwrap());
    assert_eq!(traj.len(), 51);
    assert_eq!(traj.states[0], start);
    assert_eq!(*traj.states.last().unwrap(), folded);
}

#[test]
fn quantize_is_the_nearest_bin_in_grid_units() {
    let grid = ActionGrid::default();
    let mut r = rng(4);
    let mut cases = vec![ControlAction::new(1.3, -0.22)];
    for _ in 0..2000 {
        cases.push(random_case(&mut r, &grid).1);
    }
    for a in cases {
        let got = grid.quantize(a);
        let dist = |i: usize| {
            let c = grid.dequantize(i).unwrap();
            ((c.acc - a.acc) / grid.acc_step()).powi(2) + ((c.yaw_rate - a.yaw_rate) / grid.yaw_step()).powi(2)
        };
        let best = (0..grid.size()).map(dist).fold(f64::INFINITY, f64::min);
        assert!(dist(got) <= best + 1e-12, "{a:?}");
    }
}

#[test]
fn every_bin_round_trips() {
    let grid = ActionGrid::default();
    for i in 0..grid.size() {
        assert_eq!(grid.quantize(grid.dequantize(i).unwrap()), i);
    }
    assert!(grid.dequantize(grid.size()).is_err());
}

fn rotate(s: &AgentState, phi: f64) -> AgentState {
    let (sn, cs) = phi.sin_cos();
    AgentState::new(cs * s.x - sn * s.y, sn * s.x + cs * s.y, s.heading + phi, s.speed)
}

proptest! {
    #[test]
    fn step_commutes_with_rotation(
        x in -50.0..50.0f64, y in -50.0..50.0f64, h in -3.1..3.1f64, v in 0.0..20.0f64,
        acc in -6.0..6.0f64, w in -0.6..0.6f64, phi in -3.1..3.1f64,
    ) {
        let s = AgentState::new(x, y, h, v);
        let a = ControlAction::new(acc, w);
        let lhs = ctra_step(&rotate(&s, phi), a, 0.1).unwrap();
        let rhs = rotate(&ctra_step(&s, a, 0.1).unwrap(), phi);
        prop_assert!((lhs.x - rhs.x).abs() < 1e-9 && (lhs.y - rhs.y).abs() < 1e-9);
        prop_assert!(angle_diff(lhs.heading, rhs.heading) < 1e-9);
        prop_assert!((lhs.speed - rhs.speed).abs() < 1e-12);
    }

    #[test]
    fn step_commutes_with_translation(
        x in -50.0..50.0f64, y in -50.0..50.0f64, h in -3.1..3.1f64, v in 0.0..20.0f64,
        acc in -6.0..6.0f64, w in -0.6..0.6f64, dx in -1e3..1e3f64, dy in -1e3..1e3f64,
    ) {
        let a = ControlAction::new(acc, w);
        let base = ctra_step(&AgentState::new(x, y, h, v), a, 0.1).unwrap();
        let moved = ctra_step(&AgentState::new(x + dx, y + dy, h, v), a, 0.1).unwrap();
        prop_assert!((moved.x - base.x - dx).abs() < 1e-9 && (moved.y - base.y - dy).abs() < 1e-9);
        prop_assert_eq!(moved.heading, base.heading);
        prop_assert_eq!(moved.speed, base.speed);
    }
}
