mod common;

use metaction_core::control_fit::{fit_controls, reconstruction_error, FitConfig};
use metaction_core::kinematics::{ctra_step, rollout, ActionGrid, AgentState, ControlAction, Trajectory};
use proptest::prelude::*;
use rand::Rng;

/// Horizon-1 exhaustive search over every bin, advancing with the winner.
fn exhaustive_one_step_labels(traj: &Trajectory, grid: &ActionGrid) -> Vec<usize> {
    let mut ctl = traj.states[0];
    let mut out = Vec::new();
    for target in &traj.states[1..] {
        let mut best = (f64::INFINITY, 0usize);
        for bin in 0..grid.size() {
            let s = ctra_step(&ctl, grid.dequantize(bin).unwrap(), traj.dt).unwrap();
            let e = (s.x - target.x).hypot(s.y - target.y);
            if e < best.0 {
                best = (e, bin);
            }
        }
        ctl = ctra_step(&ctl, grid.dequantize(best.1).unwrap(), traj.dt).unwrap();
        out.push(best.1);
    }
    out
}

fn noisy_bin_center_track(seed: u64) -> Trajectory {
    let grid = ActionGrid::default();
    let bin = grid.quantize(ControlAction::new(1.0, 0.1));
    let actions = vec![grid.dequantize(bin).unwrap(); 30];
    let mut traj = rollout(&AgentState::new(0.0, 0.0, 0.0, 8.0), &actions, 0.1).unwrap();
    let mut rng = common::rng(seed);
    for s in traj.states.iter_mut().skip(1) {
        s.x += 0.02 * common::gaussian(&mut rng);
        s.y += 0.02 * common::gaussian(&mut rng);
    }
    traj
}

#[test]
fn noisy_horizon_one_fit_agrees_with_exhaustive_oracle() {
    let grid = ActionGrid::default();
    let cfg = FitConfig {
        horizon_k: 1,
        ..FitConfig::default()
    };
    let (mut agree, mut total) = (0, 0);
    for seed in 0..10 {
        let traj = noisy_bin_center_track(seed);
        let oracle = exhaustive_one_step_labels(&traj, &grid);
        let fit = fit_controls(&traj, &grid, &cfg).unwrap();
        agree += fit.bin_indices.iter().zip(&oracle).filter(|(a, b)| a == b).count();
        total += oracle.len();
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}

#[test]
fn noisy_default_fit_tracks_within_five_centimetres() {
    let grid = ActionGrid::default();
    for seed in 0..10 {
        let traj = noisy_bin_center_track(seed);
        let fit = fit_controls(&traj, &grid, &FitConfig::default()).unwrap();
        let (mean, _) = reconstruction_error(&fit, &traj).unwrap();
        assert!(mean <= 0.05, "seed {seed}: mean {mean}");
    }
}

#[test]
fn horizon_one_objective_beats_every_bin() {
    let grid = ActionGrid::default();
    let cfg = FitConfig {
        horizon_k: 1,
        ..FitConfig::default()
    };
    for seed in 0..5 {
        let traj = noisy_bin_center_track(100 + seed);
        let fit = fit_controls(&traj, &grid, &cfg).unwrap();
        for t in 0..traj.len() - 1 {
            let start = fit.reconstructed.states[t];
            let best_bin = (0..grid.size())
                .map(|b| {
                    let s = ctra_step(&start, grid.dequantize(b).unwrap(), traj.dt).unwrap();
                    (s.x - traj.states[t + 1].x).hypot(s.y - traj.states[t + 1].y)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(fit.window_objective[t] <= best_bin + 1e-12, "t={t}");
            assert!(fit.per_step_residual[t] >= 0.0);
        }
    }
}

#[test]
fn fit_is_deterministic() {
    let grid = ActionGrid::default();
    let traj = noisy_bin_center_track(7);
    let a = fit_controls(&traj, &grid, &FitConfig::default()).unwrap();
    let b = fit_controls(&traj, &grid, &FitConfig::default()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bin_center_rollouts_are_recovered_exactly(seed in any::<u64>(), len in 1usize..=100) {
        let grid = ActionGrid::default();
        let mut rng = common::rng(seed);
        let start = AgentState::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0),
            rng.gen_range(-3.1..3.1), rng.gen_range(2.0..20.0));
        let actions = common::moving_bin_actions(&mut rng, &grid, &start, len, 0.1);
        let traj = rollout(&start, &actions, 0.1).unwrap();
        let fit = fit_controls(&traj, &grid, &FitConfig::default()).unwrap();
        let expected: Vec<usize> = actions.iter().map(|a| grid.quantize(*a)).collect();
        prop_assert_eq!(&fit.bin_indices, &expected);
        prop_assert!(fit.max_residual() <= 1e-6);
        prop_assert_eq!(fit.per_step_residual.len(), len);
    }
}
