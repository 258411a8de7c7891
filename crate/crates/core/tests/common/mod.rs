#![allow(dead_code)]

use metaction_core::geometry::{MapPolyline, Point2, PolylineKind, RoadMap};
use metaction_core::kinematics::{ctra_step, rollout, ActionGrid, AgentState, ControlAction};
use metaction_core::labeler::MetaAction;
use metaction_core::policy::{FitSample, Policy, PolicyInput};
use metaction_core::scene::{AgentKind, Extents};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Random bin-centre actions that keep a vehicle moving forward.
pub fn random_bin_actions(rng: &mut ChaCha8Rng, grid: &ActionGrid, len: usize) -> Vec<ControlAction> {
    (0..len)
        .map(|_| {
            let a = rng.gen_range(0..grid.acc_bins);
            let w = rng.gen_range(0..grid.yaw_bins);
            grid.dequantize(grid.join(a, w)).unwrap()
        })
        .collect()
}

/// Bin-centre actions whose rollout from `start` keeps the speed within
/// `[1, 30]` m/s, so every control is observable from positions.
pub fn moving_bin_actions(rng: &mut ChaCha8Rng, grid: &ActionGrid, start: &AgentState, len: usize, dt: f64) -> Vec<ControlAction> {
    let mut s = *start;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let a = rng.gen_range(0..grid.acc_bins);
        let w = rng.gen_range(0..grid.yaw_bins);
        let c = grid.dequantize(grid.join(a, w)).unwrap();
        let v = s.speed + c.acc * dt;
        if !(1.0..=30.0).contains(&v) {
            continue;
        }
        s = ctra_step(&s, c, dt).unwrap();
        out.push(c);
    }
    out
}

fn derivative(s: [f64; 4], acc: f64, yaw_rate: f64) -> [f64; 4] {
    let moving = s[3] > 0.0 || acc > 0.0;
    [
        s[3] * s[2].cos(),
        s[3] * s[2].sin(),
        yaw_rate,
        if moving { acc } else { 0.0 },
    ]
}

/// Integrates the CTRA equations with `substeps` classical RK4 steps.
pub fn rk4_oracle(start: &AgentState, action: ControlAction, dt: f64, substeps: usize) -> AgentState {
    let h = dt / substeps as f64;
    let mut s = [start.x, start.y, start.heading, start.speed];
    let add = |s: [f64; 4], k: [f64; 4], f: f64| [s[0] + f * k[0], s[1] + f * k[1], s[2] + f * k[2], (s[3] + f * k[3]).max(0.0)];
    for _ in 0..substeps {
        let k1 = derivative(s, action.acc, action.yaw_rate);
        let k2 = derivative(add(s, k1, h / 2.0), action.acc, action.yaw_rate);
        let k3 = derivative(add(s, k2, h / 2.0), action.acc, action.yaw_rate);
        let k4 = derivative(add(s, k3, h), action.acc, action.yaw_rate);
        for i in 0..4 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        s[3] = s[3].max(0.0);
    }
    AgentState::new(s[0], s[1], s[2], s[3])
}

/// Plain forward Euler with `substeps` steps.
pub fn euler_oracle(start: &AgentState, action: ControlAction, dt: f64, substeps: usize) -> AgentState {
    let h = dt / substeps as f64;
    let mut s = [start.x, start.y, start.heading, start.speed];
    for _ in 0..substeps {
        let k = derivative(s, action.acc, action.yaw_rate);
        for i in 0..4 {
            s[i] += h * k[i];
        }
        s[3] = s[3].max(0.0);
    }
    AgentState::new(s[0], s[1], s[2], s[3])
}

pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Random state and any in-range continuous action.
pub fn random_case(rng: &mut ChaCha8Rng, grid: &ActionGrid) -> (AgentState, ControlAction) {
    let s = AgentState::new(
        rng.gen_range(-100.0..100.0),
        rng.gen_range(-100.0..100.0),
        rng.gen_range(-3.14..3.14),
        rng.gen_range(0.0..25.0),
    );
    let a = ControlAction::new(
        rng.gen_range(-grid.acc_max..=grid.acc_max),
        rng.gen_range(-grid.yaw_max..=grid.yaw_max),
    );
    (s, a)
}

pub fn micro_grid() -> ActionGrid {
    ActionGrid::new(3, 3.0, 3, 0.3).unwrap()
}

pub fn road() -> RoadMap {
    RoadMap::new(vec![
        MapPolyline::new(1, PolylineKind::LaneCenter, vec![Point2::new(-10.0, 0.0), Point2::new(60.0, 0.0)]),
        MapPolyline::new(2, PolylineKind::LaneCenter, vec![Point2::new(-10.0, 3.5), Point2::new(60.0, 3.5)]),
        MapPolyline::new(3, PolylineKind::LaneBoundary, vec![Point2::new(-10.0, 1.75), Point2::new(60.0, 1.75)]),
    ])
    .unwrap()
}

/// One agent per script; frame t carries the action applied at t.
pub fn scripted_sample(scripts: &[Vec<usize>], seed: u64) -> FitSample {
    let grid = micro_grid();
    let mut r = rng(seed);
    let t = scripts[0].len();
    let states = scripts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let actions: Vec<_> = s.iter().map(|&b| grid.dequantize(b).unwrap()).collect();
            let start = AgentState::new(r.gen_range(-2.0..2.0), 3.5 * i as f64, 0.0, 8.0);
            rollout(&start, &actions, 0.1).unwrap().states[..t].to_vec()
        })
        .collect();
    let n = scripts.len();
    FitSample {
        input: PolicyInput {
            states,
            previous: vec![None; n],
            kinds: vec![AgentKind::Vehicle; n],
            extents: vec![Extents::CAR; n],
            first_frame: 0,
            dt: 0.1,
        },
        map: road(),
        actions: scripts.to_vec(),
        meta: scripts.iter().map(|s| s.iter().map(|_| MetaAction::KeepLane).collect()).collect(),
        mask: None,
    }
}

/// Accelerating throughout while the yaw rate steps left, straight, right.
pub fn block_script() -> Vec<usize> {
    let g = micro_grid();
    let mut s = vec![g.join(2, 2); 7];
    s.extend(vec![g.join(2, 1); 7]);
    s.extend(vec![g.join(2, 0); 6]);
    s
}

pub fn random_tables(p: &mut Policy, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = p
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("meta.embed.") || n.starts_with("inject.embed."))
        .collect();
    for n in names {
        for v in &mut p.params.get_mut(&n).unwrap().data {
            *v = r.gen_range(-1.0..1.0);
        }
    }
}

pub fn random_meta(n: usize, t: usize, seed: u64) -> Vec<Vec<MetaAction>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..t).map(|_| MetaAction::ALL[r.gen_range(0..8)]).collect()).collect()
}

pub fn three_agent_sample() -> FitSample {
    let g = micro_grid();
    let scripts = vec![
        block_script(),
        (0..20).map(|i| g.join(1, (i / 4) % 3)).collect(),
        (0..20).map(|i| g.join(i % 3, 1)).collect(),
    ];
    scripted_sample(&scripts, 3)
}
