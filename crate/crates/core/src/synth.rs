//! Scripted maneuver scenes with ground-truth meta-action labels.
//!
//! Every track is a rollout of grid bin centres, so control fitting
//! recovers the script exactly, and every road is built around the
//! scripted path. Right-hand maneuvers are mirror images of left-hand
//! ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{GeometryError, MapPolyline, Point2, PolylineKind, RoadMap};
use crate::kinematics::{ctra_step, ActionGrid, AgentState, ControlAction, KinematicsError, Trajectory};
use crate::labeler::{LabelThresholds, MetaAction};
use crate::math;
use crate::scene::{mirror_map, mirror_state, Agent, AgentKind, Extents, Scene, SceneError};

/// Lane-change lobes aim for at least this path curvature (1/m) so the
/// S-shape stays visible to a windowed cubic fit.
const LANE_CHANGE_KAPPA: f64 = 0.04;
/// Heading reached at the end of each lane-change lobe (rad).
const LANE_CHANGE_LOBE_HEADING: f64 = 0.24;
const PIECE_LENGTH: f64 = 50.0;
const ROAD_MARGIN: f64 = 30.0;
const BLOCK_GAP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("unrealizable maneuver ({threshold}): {detail}")]
    Unrealizable { threshold: &'static str, detail: String },
    #[error("no maneuvers given")]
    Empty,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn unrealizable(threshold: &'static str, detail: String) -> SynthError {
    SynthError::Unrealizable { threshold, detail }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RoadSpec {
    pub lane_count: usize,
    /// m
    pub lane_width: f64,
    /// Turn and U-turn radius, m.
    pub curve_radius: f64,
}

impl Default for RoadSpec {
    fn default() -> Self {
        Self {
            lane_count: 3,
            lane_width: 3.5,
            curve_radius: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SpeedProfile {
    /// Speed before and after the maneuver, m/s.
    pub cruise: f64,
    /// Speed during the maneuver, m/s.
    pub maneuver: f64,
}

impl Default for SpeedProfile {
    fn default() -> Self {
        Self {
            cruise: 8.0,
            maneuver: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScriptedManeuver {
    pub kind: MetaAction,
    pub road: RoadSpec,
    pub speed: SpeedProfile,
    /// Standard deviation of position noise, m.
    pub noise: f64,
    /// Frames of lane keeping before the maneuver.
    pub lead_in: usize,
    /// Frames of lane keeping after the maneuver.
    pub lead_out: usize,
    /// Frames spent at rest for `Stationary`.
    pub hold: usize,
    /// Heading change of a `TurnLeft`/`TurnRight`, degrees.
    pub turn_angle: f64,
}

impl Default for ScriptedManeuver {
    fn default() -> Self {
        Self {
            kind: MetaAction::KeepLane,
            road: RoadSpec::default(),
            speed: SpeedProfile::default(),
            noise: 0.0,
            lead_in: 60,
            lead_out: 60,
            hold: 40,
            turn_angle: 90.0,
        }
    }
}

impl ScriptedManeuver {
    pub fn new(kind: MetaAction) -> Self {
        let mut m = Self {
            kind,
            ..Self::default()
        };
        match kind {
            MetaAction::LeftUTurn | MetaAction::RightUTurn => {
                m.speed.maneuver = 1.8;
                m.road.curve_radius = 3.0;
            }
            MetaAction::TurnLeft | MetaAction::TurnRight => m.speed.maneuver = 6.0,
            _ => {}
        }
        m
    }
}

/// A generated scene with the script behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    /// Per agent, one label per frame.
    pub ground_truth: Vec<Vec<MetaAction>>,
    /// Per agent, the action bin applied at each frame.
    pub action_bins: Vec<Vec<usize>>,
}

struct Script<'g> {
    grid: &'g ActionGrid,
    dt: f64,
    states: Vec<AgentState>,
    bins: Vec<usize>,
    labels: Vec<MetaAction>,
}

impl<'g> Script<'g> {
    fn new(grid: &'g ActionGrid, dt: f64, start: AgentState) -> Self {
        Self {
            grid,
            dt,
            states: vec![start],
            bins: Vec::new(),
            labels: vec![MetaAction::KeepLane],
        }
    }

    fn last(&self) -> AgentState {
        self.states[self.states.len() - 1]
    }

    fn push(&mut self, bin: usize, frames: usize, label: MetaAction) -> Result<(), SynthError> {
        let action = self.grid.dequantize(bin)?;
        for _ in 0..frames {
            let next = ctra_step(&self.last(), action, self.dt)?;
            self.states.push(next);
            self.bins.push(bin);
            self.labels.push(label);
        }
        Ok(())
    }

    fn cruise(&mut self, frames: usize) -> Result<(), SynthError> {
        self.push(self.grid.center_index(), frames, MetaAction::KeepLane)
    }

    /// Straight speed change with the bin nearest `|acc|`.
    fn ramp_to(&mut self, target: f64, acc: f64) -> Result<(), SynthError> {
        let dv = target - self.last().speed;
        if math::abs(dv) < 1e-9 {
            return Ok(());
        }
        let bin = self.grid.quantize(ControlAction::new(acc.copysign(dv), 0.0));
        let a = self.grid.dequantize(bin)?.acc;
        if a == 0.0 || a.signum() != dv.signum() {
            return Err(unrealizable("acceleration grid", format!("no bin accelerates toward {target} m/s")));
        }
        let steps = dv / (a * self.dt);
        let frames = if target == 0.0 {
            math::ceil(steps - 1e-9) as usize
        } else {
            math::round(steps) as usize
        };
        self.push(bin, frames, MetaAction::KeepLane)
    }
}

fn yaw_bin(grid: &ActionGrid, yaw_rate: f64) -> Result<(usize, f64), SynthError> {
    let half_step = grid.yaw_step() / 2.0;
    if math::abs(yaw_rate) > grid.yaw_max + half_step {
        return Err(unrealizable(
            "yaw grid range",
            format!("yaw rate {yaw_rate:.3} rad/s exceeds the grid maximum {}", grid.yaw_max),
        ));
    }
    let bin = grid.quantize(ControlAction::new(0.0, yaw_rate));
    Ok((bin, grid.dequantize(bin)?.yaw_rate))
}

struct IdGen(u32);

impl IdGen {
    fn next(&mut self) -> u32 {
        self.0 += 1;
        self.0
    }
}

/// Parallel lanes along a straight line, each split into pieces chained by
/// successors. Offsets are lateral, positive to the left. Returns the piece
/// ids of every lane.
fn straight_road(
    ids: &mut IdGen,
    lines: &mut Vec<MapPolyline>,
    start: Point2,
    heading: f64,
    length: f64,
    offsets: &[f64],
    lane_width: f64,
) -> Vec<Vec<u32>> {
    let (c, s) = (math::cos(heading), math::sin(heading));
    let at = |along: f64, lateral: f64| Point2::new(start.x + c * along - s * lateral, start.y + s * along + c * lateral);
    let pieces = (math::floor(length / PIECE_LENGTH) as usize).max(1);
    let piece_len = length / pieces as f64;
    let lane_ids: Vec<Vec<u32>> = offsets
        .iter()
        .map(|_| (0..pieces).map(|_| ids.next()).collect())
        .collect();
    for (li, &off) in offsets.iter().enumerate() {
        for p in 0..pieces {
            let mut line = MapPolyline::new(
                lane_ids[li][p],
                PolylineKind::LaneCenter,
                vec![at(p as f64 * piece_len, off), at((p + 1) as f64 * piece_len, off)],
            );
            if p + 1 < pieces {
                line.successors.push(lane_ids[li][p + 1]);
            }
            for (lj, &other) in offsets.iter().enumerate() {
                if math::abs(math::abs(other - off) - lane_width) < 1e-9 {
                    if other > off {
                        line.left_neighbor = Some(lane_ids[lj][p]);
                    } else {
                        line.right_neighbor = Some(lane_ids[lj][p]);
                    }
                }
            }
            lines.push(line);
        }
    }
    let lo = offsets.iter().copied().fold(f64::INFINITY, f64::min) - lane_width / 2.0;
    let hi = offsets.iter().copied().fold(f64::NEG_INFINITY, f64::max) + lane_width / 2.0;
    for b in [lo, hi] {
        lines.push(MapPolyline::new(
            ids.next(),
            PolylineKind::LaneBoundary,
            vec![at(0.0, b), at(length, b)],
        ));
    }
    lane_ids
}

fn offsets(count: usize, width: f64, side: f64) -> Vec<f64> {
    (0..count.max(1)).map(|i| side * width * i as f64).collect()
}

struct Block {
    states: Vec<AgentState>,
    bins: Vec<usize>,
    labels: Vec<MetaAction>,
    lines: Vec<MapPolyline>,
}

fn build_block(
    m: &ScriptedManeuver,
    grid: &ActionGrid,
    th: &LabelThresholds,
    dt: f64,
    ids: &mut IdGen,
) -> Result<Block, SynthError> {
    let left = m.kind.is_left().unwrap_or(true);
    let canonical = if left { m.kind } else { m.kind.mirrored() };
    let w = m.road.lane_width;
    if !(w > 0.0 && m.speed.cruise >= 0.0 && m.speed.maneuver >= 0.0) {
        return Err(unrealizable("road spec", "lane width and speeds must be positive".into()));
    }
    let start = AgentState::new(0.0, 0.0, 0.0, m.speed.cruise);
    let mut sc = Script::new(grid, dt, start);
    let mut lines = Vec::new();
    let acc = 1.0;

    match canonical {
        MetaAction::KeepLane => {
            if m.speed.cruise < th.eps_v * 4.0 {
                return Err(unrealizable("eps_v", format!("cruise speed {} m/s is too slow to keep lane", m.speed.cruise)));
            }
            sc.cruise(m.lead_in)?;
            sc.ramp_to(m.speed.maneuver.max(th.eps_v * 4.0), acc)?;
            sc.cruise(m.lead_out)?;
            let len = sc.last().x + ROAD_MARGIN;
            straight_road(ids, &mut lines, Point2::new(-ROAD_MARGIN, 0.0), 0.0, len + ROAD_MARGIN, &offsets(m.road.lane_count, w, 1.0), w);
        }
        MetaAction::Stationary => {
            if m.hold == 0 {
                return Err(unrealizable("eps_v", "a stationary maneuver needs hold > 0 frames".into()));
            }
            sc.cruise(m.lead_in)?;
            sc.ramp_to(0.0, 2.0)?;
            let stop = sc.states.len() - 1;
            sc.push(grid.center_index(), m.hold, MetaAction::KeepLane)?;
            sc.ramp_to(m.speed.cruise, 2.0)?;
            sc.cruise(m.lead_out)?;
            for (t, s) in sc.states.iter().enumerate() {
                if t >= stop && s.speed == 0.0 {
                    sc.labels[t] = MetaAction::Stationary;
                }
            }
            let len = sc.last().x + ROAD_MARGIN;
            straight_road(ids, &mut lines, Point2::new(-ROAD_MARGIN, 0.0), 0.0, len + ROAD_MARGIN, &offsets(m.road.lane_count, w, 1.0), w);
        }
        MetaAction::LeftLaneChange => {
            if m.road.lane_count < 2 {
                return Err(unrealizable("d_min", "a lane change needs at least two lanes".into()));
            }
            if w <= th.d_min {
                return Err(unrealizable("d_min", format!("lane width {w} m does not exceed d_min = {} m", th.d_min)));
            }
            let v = m.speed.maneuver;
            sc.cruise(m.lead_in)?;
            sc.ramp_to(v, acc)?;
            let c = grid.center_index() % grid.yaw_bins;
            let yaw_bin = (c + 1..grid.yaw_bins).find(|&j| grid.yaw_center(j) / v >= LANE_CHANGE_KAPPA);
            let Some(j) = yaw_bin else {
                return Err(unrealizable(
                    "eps_kappa",
                    format!("at {v} m/s no yaw rate gives lane-change curvature {LANE_CHANGE_KAPPA} 1/m"),
                ));
            };
            let omega = grid.yaw_center(j);
            let lobe = ((LANE_CHANGE_LOBE_HEADING / (omega * dt)) as usize).max(1);
            if math::to_degrees(omega * lobe as f64 * dt) >= th.theta_min {
                return Err(unrealizable("theta_min", "lane-change lobe would read as a turn".into()));
            }
            let acc_c = grid.center_index() / grid.yaw_bins;
            let (up, down) = (grid.join(acc_c, j), grid.join(acc_c, 2 * c - j));
            let from = sc.last();
            let shift = |middle: usize| -> Result<f64, SynthError> {
                let mut s = from;
                for (bin, n) in [(up, lobe), (grid.center_index(), middle), (down, lobe)] {
                    let a = grid.dequantize(bin)?;
                    for _ in 0..n {
                        s = ctra_step(&s, a, dt)?;
                    }
                }
                Ok(s.y - from.y)
            };
            let mut best = (f64::INFINITY, 0);
            for middle in 0..400 {
                let err = math::abs(shift(middle)? - w);
                if err < best.0 {
                    best = (err, middle);
                }
            }
            if best.0 > th.eps_d / 2.0 {
                return Err(unrealizable(
                    "eps_d",
                    format!("lane change ends {:.2} m off the target centerline", best.0),
                ));
            }
            sc.push(up, lobe, MetaAction::LeftLaneChange)?;
            sc.push(grid.center_index(), best.1, MetaAction::LeftLaneChange)?;
            sc.push(down, lobe, MetaAction::LeftLaneChange)?;
            sc.ramp_to(m.speed.cruise, acc)?;
            sc.cruise(m.lead_out)?;
            let len = sc.last().x + ROAD_MARGIN;
            straight_road(ids, &mut lines, Point2::new(-ROAD_MARGIN, 0.0), 0.0, len + ROAD_MARGIN, &offsets(m.road.lane_count, w, 1.0), w);
        }
        MetaAction::TurnLeft | MetaAction::LeftUTurn => {
            let uturn = canonical == MetaAction::LeftUTurn;
            let v = m.speed.maneuver;
            if !(v > 0.0 && m.road.curve_radius > 0.0) {
                return Err(unrealizable("road spec", "turns need positive speed and radius".into()));
            }
            let (bin, omega) = yaw_bin(grid, v / m.road.curve_radius)?;
            let kappa = omega / v;
            if uturn && kappa <= th.kappa_max {
                return Err(unrealizable(
                    "kappa_max",
                    format!("U-turn curvature {kappa:.3} 1/m must exceed kappa_max = {}", th.kappa_max),
                ));
            }
            if !uturn && kappa < th.kappa_min {
                return Err(unrealizable(
                    "kappa_min",
                    format!("turn curvature {kappa:.3} 1/m is below kappa_min = {}", th.kappa_min),
                ));
            }
            if !uturn && kappa > th.kappa_max {
                return Err(unrealizable(
                    "kappa_max",
                    format!("turn curvature {kappa:.3} 1/m exceeds kappa_max = {}", th.kappa_max),
                ));
            }
            let target = if uturn { PI } else { math::to_radians(m.turn_angle) };
            let frames = math::round(target / (omega * dt)) as usize;
            let swept = math::to_degrees(omega * frames as f64 * dt);
            if uturn && math::abs(swept - 180.0) > th.alpha_uturn {
                return Err(unrealizable("alpha_uturn", format!("U-turn sweeps {swept:.1} degrees")));
            }
            if !uturn && swept < th.theta_min {
                return Err(unrealizable("theta_min", format!("turn sweeps only {swept:.1} degrees")));
            }
            sc.cruise(m.lead_in)?;
            sc.ramp_to(v, acc)?;
            let arc_start = sc.states.len() - 1;
            let label = if uturn { MetaAction::LeftUTurn } else { MetaAction::TurnLeft };
            sc.push(bin, frames, label)?;
            let arc_end = sc.states.len() - 1;
            sc.ramp_to(m.speed.cruise, acc)?;
            sc.cruise(m.lead_out)?;

            let lanes = offsets(m.road.lane_count, w, -1.0);
            let a = sc.states[arc_start];
            let approach = straight_road(ids, &mut lines, Point2::new(-ROAD_MARGIN, 0.0), 0.0, a.x + ROAD_MARGIN, &lanes, w);
            let connector = ids.next();
            let arc: Vec<Point2> = sc.states[arc_start..=arc_end].iter().map(Point2::from).collect();
            let mut arc_line = MapPolyline::new(connector, PolylineKind::LaneCenter, arc);
            let e = sc.states[arc_end];
            let tail = sc.last();
            let exit_len = (tail.x - e.x) * math::cos(e.heading) + (tail.y - e.y) * math::sin(e.heading) + ROAD_MARGIN;
            let exit = straight_road(ids, &mut lines, Point2::from(&e), e.heading, exit_len, &lanes, w);
            arc_line.successors.push(exit[0][0]);
            if let Some(last) = approach[0].last() {
                let line = lines.iter_mut().find(|l| l.id == *last).expect("approach lane exists");
                line.successors.push(connector);
            }
            lines.push(arc_line);
        }
        other => unreachable!("{other:?} is not a canonical left-hand maneuver"),
    }

    let mut block = Block {
        states: sc.states,
        bins: sc.bins,
        labels: sc.labels,
        lines,
    };
    if !left {
        let map = mirror_map(&RoadMap::new(block.lines)?);
        block.lines = map.polylines().to_vec();
        block.states = block.states.iter().map(mirror_state).collect();
        block.labels = block.labels.iter().map(|l| l.mirrored()).collect();
        block.bins = block
            .bins
            .iter()
            .map(|&b| {
                let (i, j) = grid.split(b);
                grid.join(i, grid.yaw_bins - 1 - j)
            })
            .collect();
    }
    Ok(block)
}

fn bbox_y(block: &Block) -> (f64, f64) {
    let ys = block
        .states
        .iter()
        .map(|s| s.y)
        .chain(block.lines.iter().flat_map(|l| l.points.iter().map(|p| p.y)));
    ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)))
}

/// Builds one agent per maneuver, each on its own road, stacked along y.
/// Tracks are padded by holding the final action so all agents share the
/// longest length.
pub fn generate_scene(
    maneuvers: &[ScriptedManeuver],
    grid: &ActionGrid,
    thresholds: &LabelThresholds,
    seed: u64,
) -> Result<GeneratedScene, SynthError> {
    if maneuvers.is_empty() {
        return Err(SynthError::Empty);
    }
    grid.validate()?;
    let dt = 0.1;
    let mut ids = IdGen(0);
    let mut blocks = Vec::with_capacity(maneuvers.len());
    for m in maneuvers {
        blocks.push(build_block(m, grid, thresholds, dt, &mut ids)?);
    }
    let frames = blocks.iter().map(|b| b.states.len()).max().unwrap_or(0);
    for b in &mut blocks {
        while b.states.len() < frames {
            let bin = b.bins.last().copied().unwrap_or(grid.center_index());
            let action = grid.dequantize(bin)?;
            let next = ctra_step(&b.states[b.states.len() - 1], action, dt)?;
            b.states.push(next);
            b.bins.push(bin);
            let label = b.labels[b.labels.len() - 1];
            b.labels.push(label);
        }
    }
    let mut top = f64::NEG_INFINITY;
    for b in &mut blocks {
        let (lo, hi) = bbox_y(b);
        if top.is_finite() {
            let dy = top + BLOCK_GAP - lo;
            for s in &mut b.states {
                s.y += dy;
            }
            for l in &mut b.lines {
                for p in &mut l.points {
                    p.y += dy;
                }
            }
            top = hi + dy;
        } else {
            top = hi;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = Vec::with_capacity(blocks.len());
    let mut lines = Vec::new();
    let mut ground_truth = Vec::with_capacity(blocks.len());
    let mut action_bins = Vec::with_capacity(blocks.len());
    for (k, (b, m)) in blocks.into_iter().zip(maneuvers).enumerate() {
        let mut states = b.states;
        if m.noise > 0.0 {
            let normal = Normal::new(0.0, m.noise)
                .map_err(|_| unrealizable("noise", format!("bad noise level {}", m.noise)))?;
            for s in &mut states {
                s.x += normal.sample(&mut rng);
                s.y += normal.sample(&mut rng);
            }
        }
        agents.push(Agent {
            id: k as u32 + 1,
            kind: AgentKind::Vehicle,
            extents: Extents::CAR,
            track: Trajectory::new(states, dt),
        });
        lines.extend(b.lines);
        ground_truth.push(b.labels);
        action_bins.push(b.bins);
    }
    let scene = Scene::new(format!("synth-{seed}"), 1.0 / dt, agents, RoadMap::new(lines)?)?;
    Ok(GeneratedScene {
        scene,
        ground_truth,
        action_bins,
    })
}

fn tenths(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = (math::round(lo * 10.0) as i64, math::round(hi * 10.0) as i64);
    rng.gen_range(a..=b) as f64 / 10.0
}

/// A randomized but always realizable maneuver of the given kind.
pub fn sample_maneuver(kind: MetaAction, rng: &mut ChaCha8Rng) -> ScriptedManeuver {
    let mut m = ScriptedManeuver::new(kind);
    m.lead_in = rng.gen_range(140..=180);
    m.lead_out = rng.gen_range(140..=180);
    m.road.lane_count = rng.gen_range(2..=4);
    match kind {
        MetaAction::KeepLane => {
            m.speed.cruise = tenths(rng, 5.0, 14.0);
            m.speed.maneuver = tenths(rng, 5.0, 14.0);
        }
        MetaAction::Stationary => {
            m.speed.cruise = 2.0 * tenths(rng, 3.0, 5.0) + 0.1;
            m.hold = rng.gen_range(40..=80);
        }
        MetaAction::LeftLaneChange | MetaAction::RightLaneChange => {
            m.speed.cruise = tenths(rng, 6.0, 12.0);
            m.speed.maneuver = m.speed.cruise;
        }
        MetaAction::TurnLeft | MetaAction::TurnRight => {
            m.speed.maneuver = tenths(rng, 5.0, 9.0);
            m.speed.cruise = m.speed.maneuver + tenths(rng, 0.0, 3.0);
            let omega = [0.2, 0.3, 0.4][rng.gen_range(0..3)];
            m.road.curve_radius = m.speed.maneuver / omega;
            m.turn_angle = rng.gen_range(75.0..=105.0);
        }
        MetaAction::LeftUTurn | MetaAction::RightUTurn => {
            let (v, omega) = [(1.5, 0.5), (1.5, 0.6), (1.8, 0.6), (2.0, 0.6)][rng.gen_range(0..4)];
            m.speed.maneuver = v;
            m.speed.cruise = tenths(rng, 5.0, 8.0);
            m.road.curve_radius = v / omega;
        }
    }
    m
}

/// `per_class` single-agent scenes of every meta-action, noise free.
pub fn scripted_corpus(
    per_class: usize,
    grid: &ActionGrid,
    thresholds: &LabelThresholds,
    seed: u64,
) -> Result<Vec<GeneratedScene>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * MetaAction::COUNT);
    for kind in MetaAction::ALL {
        for _ in 0..per_class {
            let m = sample_maneuver(kind, &mut rng);
            out.push(generate_scene(&[m], grid, thresholds, rng.gen())?);
        }
    }
    Ok(out)
}
