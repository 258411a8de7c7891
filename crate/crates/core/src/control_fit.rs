//! Discrete control-action labels from observed trajectories.
//!
//! A rolling-horizon fit: at each frame a sequence of `k` continuous
//! controls is optimized so the CTRA-propagated positions track the
//! observed ones, the first control is snapped to its grid bin, and the
//! tracking state is advanced with that binned control.

use alloc::vec;
use alloc::vec::Vec;

use crate::kinematics::{ctra_step, ActionGrid, AgentState, ControlAction, KinematicsError, Trajectory};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("trajectory needs at least 2 states, got {0}")]
    TooShort(usize),
    #[error("length mismatch: {expected} states expected, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid fit config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FitConfig {
    /// Prediction horizon in frames.
    pub horizon_k: usize,
    /// Nelder-Mead iteration cap per frame.
    pub max_iterations: usize,
    /// Objective value (m) below which a frame's fit counts as converged.
    pub convergence_tol: f64,
    /// Zoom levels of the single-step grid search used for initialization.
    pub coarse_grid_refinements: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            horizon_k: 5,
            max_iterations: 400,
            convergence_tol: 1e-9,
            coarse_grid_refinements: 4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.horizon_k == 0 {
            return Err(FitError::BadConfig("horizon_k must be at least 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(FitError::BadConfig("convergence_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub bin_indices: Vec<usize>,
    /// First optimized (unbinned) control of each window.
    pub continuous_controls: Vec<ControlAction>,
    /// Position error after advancing with the binned control.
    pub per_step_residual: Vec<f64>,
    /// Optimized horizon objective of each window, before binning.
    pub window_objective: Vec<f64>,
    /// Frames whose optimizer hit the iteration cap above tolerance.
    pub unconverged: Vec<bool>,
    pub reconstructed: Trajectory,
}

impl FitResult {
    pub fn max_residual(&self) -> f64 {
        self.per_step_residual.iter().copied().fold(0.0, f64::max)
    }
}

fn position_error(a: &AgentState, b: &AgentState) -> f64 {
    math::hypot(a.x - b.x, a.y - b.y)
}

/// Sum of position errors when propagating `start` with `controls`
/// against `targets`.
fn horizon_cost(start: &AgentState, controls: &[ControlAction], targets: &[AgentState], grid: &ActionGrid, dt: f64) -> f64 {
    let mut s = *start;
    let mut cost = 0.0;
    for (c, target) in controls.iter().zip(targets) {
        s = match ctra_step(&s, grid.clamp(*c), dt) {
            Ok(next) => next,
            Err(_) => return f64::INFINITY,
        };
        cost += position_error(&s, target);
    }
    cost
}

/// Best single control for one step by coarse-to-fine grid search.
/// Among equal errors the control nearest `(0, 0)` in bin units wins.
fn single_step_search(
    start: &AgentState,
    target: &AgentState,
    grid: &ActionGrid,
    dt: f64,
    refinements: usize,
) -> ControlAction {
    let (sa, sw) = (grid.acc_step(), grid.yaw_step());
    let magnitude = |c: &ControlAction| math::abs(c.acc / sa) + math::abs(c.yaw_rate / sw);
    let eval = |c: ControlAction| match ctra_step(start, c, dt) {
        Ok(s) => position_error(&s, target),
        Err(_) => f64::INFINITY,
    };
    let mut best = ControlAction::ZERO;
    let mut best_err = eval(best);
    let consider = |c: ControlAction, best: &mut ControlAction, best_err: &mut f64| {
        let e = eval(c);
        if e < *best_err || (e == *best_err && magnitude(&c) < magnitude(best)) {
            *best = c;
            *best_err = e;
        }
    };
    for i in 0..grid.acc_bins {
        for j in 0..grid.yaw_bins {
            let c = ControlAction::new(grid.acc_center(i), grid.yaw_center(j));
            consider(c, &mut best, &mut best_err);
        }
    }
    let (mut ha, mut hw) = (sa, sw);
    for _ in 0..refinements {
        let center = best;
        for i in -4i32..=4 {
            for j in -4i32..=4 {
                if i == 0 && j == 0 {
                    continue;
                }
                let c = grid.clamp(ControlAction::new(
                    center.acc + ha * i as f64 / 4.0,
                    center.yaw_rate + hw * j as f64 / 4.0,
                ));
                consider(c, &mut best, &mut best_err);
            }
        }
        ha /= 4.0;
        hw /= 4.0;
    }
    best
}

/// Nelder-Mead over a flat parameter vector. Returns the best point, its
/// value and whether the iteration cap was reached.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    steps: &[f64],
    max_iterations: usize,
    tol: f64,
) -> (Vec<f64>, f64, bool) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += steps[i];
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut exhausted = true;
    for _ in 0..max_iterations {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if values[0] <= tol || values[n] - values[0] <= tol * 1e-3 {
            exhausted = false;
            break;
        }
        let mut centroid = vec![0.0; n];
        for p in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let (contracted, fc) = if fr < values[n] {
                let p = along(-0.5);
                let v = f(&p);
                (p, v)
            } else {
                let p = along(0.5);
                let v = f(&p);
                (p, v)
            };
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    for (x, b) in simplex[i].iter_mut().zip(&best) {
                        *x = b + 0.5 * (*x - b);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let (bi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap_or((0, &0.0));
    (simplex[bi].clone(), values[bi], exhausted && values[bi] > tol)
}

fn flatten(controls: &[ControlAction]) -> Vec<f64> {
    controls.iter().flat_map(|c| [c.acc, c.yaw_rate]).collect()
}

fn unflatten(x: &[f64]) -> Vec<ControlAction> {
    x.chunks(2).map(|c| ControlAction::new(c[0], c[1])).collect()
}

/// Greedy chain of single-step searches, starting at `from` within the window.
fn greedy_tail(
    start: &AgentState,
    prefix: &[ControlAction],
    targets: &[AgentState],
    grid: &ActionGrid,
    dt: f64,
    refinements: usize,
) -> Vec<ControlAction> {
    let mut controls: Vec<ControlAction> = prefix.to_vec();
    let mut s = *start;
    for c in &controls {
        s = ctra_step(&s, *c, dt).unwrap_or(s);
    }
    for target in &targets[controls.len()..] {
        let c = single_step_search(&s, target, grid, dt, refinements);
        s = ctra_step(&s, c, dt).unwrap_or(s);
        controls.push(c);
    }
    controls
}

/// Rolling-horizon control-label extraction.
pub fn fit_controls(traj: &Trajectory, grid: &ActionGrid, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    grid.validate()?;
    let n = traj.len();
    if n < 2 {
        return Err(FitError::TooShort(n));
    }
    let dt = traj.dt;
    let obs = &traj.states;
    let steps = n - 1;
    let mut out = FitResult {
        bin_indices: Vec::with_capacity(steps),
        continuous_controls: Vec::with_capacity(steps),
        per_step_residual: Vec::with_capacity(steps),
        window_objective: Vec::with_capacity(steps),
        unconverged: Vec::with_capacity(steps),
        reconstructed: Trajectory::new(Vec::with_capacity(n), dt),
    };
    let mut ctl = obs[0];
    out.reconstructed.states.push(ctl);
    let mut previous: Vec<ControlAction> = Vec::new();
    let nm_steps: Vec<f64> = (0..cfg.horizon_k)
        .flat_map(|_| [grid.acc_step() * 0.5, grid.yaw_step() * 0.5])
        .collect();

    for t in 0..steps {
        let k = cfg.horizon_k.min(steps - t);
        let targets = &obs[t + 1..t + 1 + k];

        let warm: Vec<ControlAction> = previous.iter().skip(1).take(k).copied().collect();
        let mut best = greedy_tail(&ctl, &warm, targets, grid, dt, cfg.coarse_grid_refinements);
        let mut best_cost = horizon_cost(&ctl, &best, targets, grid, dt);
        if best_cost > cfg.convergence_tol && !warm.is_empty() {
            let fresh = greedy_tail(&ctl, &[], targets, grid, dt, cfg.coarse_grid_refinements);
            let cost = horizon_cost(&ctl, &fresh, targets, grid, dt);
            if cost < best_cost {
                best = fresh;
                best_cost = cost;
            }
        }
        let mut unconverged = false;
        if best_cost > cfg.convergence_tol {
            let mut objective = |x: &[f64]| horizon_cost(&ctl, &unflatten(x), targets, grid, dt);
            let (x, value, exhausted) = nelder_mead(
                &mut objective,
                &flatten(&best),
                &nm_steps[..2 * k],
                cfg.max_iterations,
                cfg.convergence_tol,
            );
            if value < best_cost {
                best = unflatten(&x).into_iter().map(|c| grid.clamp(c)).collect();
                best_cost = value;
            }
            unconverged = exhausted;
        }

        let first = grid.clamp(best[0]);
        let bin = grid.quantize(first);
        ctl = ctra_step(&ctl, grid.dequantize(bin)?, dt)?;
        out.bin_indices.push(bin);
        out.continuous_controls.push(first);
        out.per_step_residual.push(position_error(&ctl, &obs[t + 1]));
        out.window_objective.push(best_cost);
        out.unconverged.push(unconverged);
        out.reconstructed.states.push(ctl);
        previous = best;
    }
    Ok(out)
}

/// Mean and max position error between a fit's reconstruction and the
/// observed trajectory.
pub fn reconstruction_error(result: &FitResult, traj: &Trajectory) -> Result<(f64, f64), FitError> {
    let rec = &result.reconstructed.states;
    if rec.len() != traj.len() {
        return Err(FitError::LengthMismatch {
            expected: traj.len(),
            got: rec.len(),
        });
    }
    if rec.is_empty() {
        return Ok((0.0, 0.0));
    }
    let errs = rec.iter().zip(&traj.states).map(|(a, b)| position_error(a, b));
    let (sum, max) = errs.fold((0.0, 0.0f64), |(s, m), e| (s + e, m.max(e)));
    Ok((sum / rec.len() as f64, max))
}
