//! Closed-loop autoregressive rollout with meta-action injection.
//!
//! Every step first fixes one meta-action per agent (sampled from the meta
//! head or forced by an override), then samples a control action from the
//! action head conditioned on it, steps CTRA kinematics and appends the
//! new state.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kinematics::{ctra_step, ActionGrid, AgentState, KinematicsError, Trajectory};
use crate::labeler::{label_actions, LabelConfig, LabelError, MetaAction};
use crate::policy::{MapContext, Policy, PolicyError};
use crate::scene::{Scene, SceneError};
use crate::tensor::{softmax, Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("scene has {found} frames, warmup needs {needed}")]
    Warmup { found: usize, needed: usize },
    #[error("horizon of {0} frames reached")]
    HorizonReached(usize),
    #[error("frame {frame}: {source}")]
    Policy { frame: usize, source: PolicyError },
    #[error("frame {frame}: {source}")]
    Kinematics { frame: usize, source: KinematicsError },
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("action grid has {grid} bins but the policy predicts {policy}")]
    GridMismatch { grid: usize, policy: usize },
    #[error("override for frame {frame} is in the past (current frame {current})")]
    PastOverride { frame: usize, current: usize },
    #[error("invalid sim config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SimConfig {
    pub horizon: usize,
    /// History frames taken from the scene before the first step.
    pub warmup: usize,
    /// 0 selects the most likely class.
    pub temperature: f64,
    pub grid: ActionGrid,
    pub labels: LabelConfig,
    /// Agents driven by the foundation branch without meta conditioning.
    pub foundation_agents: Vec<u32>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 80,
            warmup: 10,
            temperature: 1.0,
            grid: ActionGrid::default(),
            labels: LabelConfig::default(),
            foundation_agents: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.warmup < 2 {
            return Err(SimError::Config("warmup must be at least 2 frames"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SimError::Config("temperature must be finite and non-negative"));
        }
        self.grid.validate().map_err(|_| SimError::Config("invalid action grid"))?;
        self.labels.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind", content = "meta_action"))]
pub enum OverrideCommand {
    Set(MetaAction),
    Release,
}

/// Override applied at the start of rollout frame `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct OverrideEvent {
    pub frame: usize,
    pub agent: u32,
    pub command: OverrideCommand,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AgentStep {
    pub agent: u32,
    pub meta_action: MetaAction,
    pub meta_probs: Vec<f64>,
    pub injected: bool,
    pub action_bin: usize,
    pub action_probs: Vec<f64>,
    pub state: AgentState,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StepRecord {
    pub frame: usize,
    pub agents: Vec<AgentStep>,
}

#[derive(Debug, Clone)]
pub struct RolloutSession {
    scene: Scene,
    policy: Arc<Policy>,
    config: SimConfig,
    seed: u64,
    rng: ChaCha8Rng,
    current_frame: usize,
    /// Per agent, warmup plus generated states.
    states: Vec<Vec<AgentState>>,
    /// Per agent, aligned with `states`; the last entry is provisional
    /// until the next step decides it.
    meta: Vec<Vec<MetaAction>>,
    active: BTreeMap<u32, MetaAction>,
    scheduled: BTreeMap<usize, Vec<(u32, OverrideCommand)>>,
    applied: Vec<OverrideEvent>,
    records: Vec<StepRecord>,
    map: MapContext,
    /// Fused environment tokens per history frame, `n x d` each.
    env: Vec<Matrix>,
    foundation_only: Vec<bool>,
}

/// Validates the inputs and labels the warmup history.
pub fn create_session(scene: &Scene, policy: Arc<Policy>, config: SimConfig, seed: u64) -> Result<RolloutSession, SimError> {
    config.validate()?;
    scene.validate()?;
    if config.grid.size() != policy.config.action_bins {
        return Err(SimError::GridMismatch {
            grid: config.grid.size(),
            policy: policy.config.action_bins,
        });
    }
    if scene.frame_count() < config.warmup {
        return Err(SimError::Warmup {
            found: scene.frame_count(),
            needed: config.warmup,
        });
    }
    let w = config.warmup;
    let mut meta = Vec::with_capacity(scene.agents.len());
    for a in &scene.agents {
        let mut labels = label_actions(&a.track, &scene.map, &config.labels)?;
        labels.truncate(w);
        meta.push(labels);
    }
    let states: Vec<Vec<AgentState>> = scene.agents.iter().map(|a| a.track.states[..w].to_vec()).collect();
    let map = policy.map_context(&scene.map).map_err(|source| SimError::Policy { frame: 0, source })?;
    let foundation_only = scene.agents.iter().map(|a| config.foundation_agents.contains(&a.id)).collect();
    let mut session = RolloutSession {
        scene: scene.clone(),
        policy,
        config,
        seed,
        rng: ChaCha8Rng::seed_from_u64(seed),
        current_frame: 0,
        states,
        meta,
        active: BTreeMap::new(),
        scheduled: BTreeMap::new(),
        applied: Vec::new(),
        records: Vec::new(),
        map,
        env: Vec::new(),
        foundation_only,
    };
    for f in 0..w {
        session.push_env(f).map_err(|source| SimError::Policy { frame: 0, source })?;
    }
    Ok(session)
}

fn sample(probs: &[f64], logits: &[f64], temperature: f64, u: f64) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        softmax(&logits.iter().map(|l| l / temperature).collect::<Vec<_>>())
    };
    let mut acc = 0.0;
    for (i, p) in scaled.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    scaled.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl RolloutSession {
    pub fn current_frame(&self) -> usize {
        self.current_frame
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn agent_ids(&self) -> Vec<u32> {
        self.scene.agents.iter().map(|a| a.id).collect()
    }

    /// Warmup plus generated states of every agent.
    pub fn states(&self) -> &[Vec<AgentState>] {
        &self.states
    }

    pub fn meta_history(&self) -> &[Vec<MetaAction>] {
        &self.meta
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn last_record(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Every override command applied so far, in order.
    pub fn override_log(&self) -> &[OverrideEvent] {
        &self.applied
    }

    pub fn active_overrides(&self) -> &BTreeMap<u32, MetaAction> {
        &self.active
    }

    /// Override the next step will apply to `agent`, counting commands
    /// scheduled for the current frame.
    pub fn pending_override(&self, agent: u32) -> Option<MetaAction> {
        let mut current = self.active.get(&agent).copied();
        for &(a, cmd) in self.scheduled.get(&self.current_frame).into_iter().flatten() {
            if a == agent {
                current = match cmd {
                    OverrideCommand::Set(m) => Some(m),
                    OverrideCommand::Release => None,
                };
            }
        }
        current
    }

    /// Generated trajectory of each agent, warmup included.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.states.iter().map(|s| Trajectory::new(s.clone(), self.scene.dt())).collect()
    }

    fn agent_index(&self, agent: u32) -> Result<usize, SimError> {
        self.scene
            .agents
            .iter()
            .position(|a| a.id == agent)
            .ok_or(SimError::Scene(SceneError::UnknownAgent(agent)))
    }

    /// Queues a command for a rollout frame not yet stepped.
    pub fn schedule(&mut self, event: OverrideEvent) -> Result<(), SimError> {
        self.agent_index(event.agent)?;
        if event.frame < self.current_frame {
            return Err(SimError::PastOverride {
                frame: event.frame,
                current: self.current_frame,
            });
        }
        self.scheduled.entry(event.frame).or_default().push((event.agent, event.command));
        Ok(())
    }

    /// Forces `action` from the current frame until released or replaced.
    pub fn set_override(&mut self, agent: u32, action: MetaAction) -> Result<(), SimError> {
        self.schedule(OverrideEvent {
            frame: self.current_frame,
            agent,
            command: OverrideCommand::Set(action),
        })
    }

    /// Returns meta-action selection for `agent` to the model.
    pub fn release_override(&mut self, agent: u32) -> Result<(), SimError> {
        self.schedule(OverrideEvent {
            frame: self.current_frame,
            agent,
            command: OverrideCommand::Release,
        })
    }

    /// Back to frame 0 with the original seed and no overrides.
    pub fn reset(&mut self) -> Result<(), SimError> {
        *self = create_session(&self.scene, self.policy.clone(), self.config.clone(), self.seed)?;
        Ok(())
    }

    fn push_env(&mut self, f: usize) -> Result<(), PolicyError> {
        let now: Vec<AgentState> = self.states.iter().map(|s| s[f]).collect();
        let prev: Vec<Option<AgentState>> = self.states.iter().map(|s| f.checked_sub(1).map(|p| s[p])).collect();
        let kinds: Vec<_> = self.scene.agents.iter().map(|a| a.kind).collect();
        let extents: Vec<_> = self.scene.agents.iter().map(|a| a.extents).collect();
        let tokens = self.policy.encode_frame(&now, &prev, &kinds, &extents, self.scene.dt())?;
        let fused = self.policy.fuse_frame(&tokens, &now, &self.map)?;
        self.env.push(fused);
        Ok(())
    }

    fn window_env(&self) -> (Tensor3, usize) {
        let h = self.env.len();
        let w = h.min(self.policy.config.window);
        let start = h - w;
        let mut env = Tensor3::zeros(self.states.len(), w, self.policy.config.embed_dim);
        for (tau, m) in self.env[start..].iter().enumerate() {
            env.set_frame(tau, m);
        }
        (env, start)
    }

    /// Steps with extra persistent overrides applied at this frame first.
    pub fn step_with(&mut self, overrides: &[(u32, MetaAction)]) -> Result<StepRecord, SimError> {
        if self.current_frame >= self.config.horizon {
            return Err(SimError::HorizonReached(self.config.horizon));
        }
        for &(agent, action) in overrides {
            self.set_override(agent, action)?;
        }
        self.step()
    }

    pub fn step(&mut self) -> Result<StepRecord, SimError> {
        let frame = self.current_frame;
        if frame >= self.config.horizon {
            return Err(SimError::HorizonReached(self.config.horizon));
        }
        if let Some(cmds) = self.scheduled.remove(&frame) {
            for (agent, command) in cmds {
                match command {
                    OverrideCommand::Set(a) => self.active.insert(agent, a),
                    OverrideCommand::Release => self.active.remove(&agent),
                };
                self.applied.push(OverrideEvent { frame, agent, command });
            }
        }
        let policy_err = |source| SimError::Policy { frame, source };
        let (env, start) = self.window_env();
        let last = env.t - 1;
        let n = self.states.len();
        let window_meta: Vec<Vec<MetaAction>> = self.meta.iter().map(|m| m[start..].to_vec()).collect();
        let (_, meta_logits) = self.policy.meta_branch(&env, &window_meta, start).map_err(policy_err)?;
        let mut chosen = window_meta;
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let id = self.scene.agents[i].id;
            let logits = meta_logits[i].row(last);
            let probs = softmax(logits);
            let u: f64 = self.rng.gen();
            let (action, injected) = match self.active.get(&id) {
                Some(&forced) => (forced, true),
                None => (MetaAction::ALL[sample(&probs, logits, self.config.temperature, u)], false),
            };
            chosen[i][last] = action;
            steps.push((id, action, probs, injected));
        }
        let (_, conditioned) = self.policy.action_branch(&env, Some(&chosen), start).map_err(policy_err)?;
        let foundation = if self.foundation_only.iter().any(|&f| f) {
            Some(self.policy.action_branch(&env, None, start).map_err(policy_err)?.1)
        } else {
            None
        };
        let dt = self.scene.dt();
        let mut record = StepRecord {
            frame,
            agents: Vec::with_capacity(n),
        };
        for (i, (id, action, meta_probs, injected)) in steps.into_iter().enumerate() {
            let logits = match (&foundation, self.foundation_only[i]) {
                (Some(f), true) => f[i].row(last),
                _ => conditioned[i].row(last),
            };
            let probs = softmax(logits);
            let u: f64 = self.rng.gen();
            let bin = sample(&probs, logits, self.config.temperature, u);
            let control = self.config.grid.dequantize(bin).map_err(|source| SimError::Kinematics { frame, source })?;
            let prev = *self.states[i].last().expect("non-empty history");
            let next = ctra_step(&prev, control, dt).map_err(|source| SimError::Kinematics { frame, source })?;
            let h = self.meta[i].len();
            self.meta[i][h - 1] = action;
            record.agents.push(AgentStep {
                agent: id,
                meta_action: action,
                meta_probs,
                injected,
                action_bin: bin,
                action_probs: probs,
                state: next,
            });
        }
        for (i, a) in record.agents.iter().enumerate() {
            self.states[i].push(a.state);
            self.meta[i].push(a.meta_action);
        }
        let h = self.states[0].len();
        self.push_env(h - 1).map_err(policy_err)?;
        self.current_frame += 1;
        self.records.push(record.clone());
        Ok(record)
    }

    /// Steps until the horizon.
    pub fn run_to_horizon(&mut self) -> Result<(), SimError> {
        while self.current_frame < self.config.horizon {
            self.step()?;
        }
        Ok(())
    }
}

/// Re-runs a session from its seed and override log.
pub fn replay(
    scene: &Scene,
    policy: Arc<Policy>,
    config: SimConfig,
    seed: u64,
    overrides: &[OverrideEvent],
    frames: usize,
) -> Result<Vec<StepRecord>, SimError> {
    let mut s = create_session(scene, policy, config, seed)?;
    for e in overrides {
        s.schedule(*e)?;
    }
    for _ in 0..frames {
        s.step()?;
    }
    Ok(s.records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSample {
    pub seed: u64,
    /// Per agent, warmup plus generated states.
    pub trajectories: Vec<Trajectory>,
    pub records: Vec<StepRecord>,
}

/// Seed used for sample `k` of a batch.
pub fn sample_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

/// `k` independent sessions run to the horizon.
pub fn rollout_batch(
    scene: &Scene,
    policy: Arc<Policy>,
    config: &SimConfig,
    k: usize,
    base_seed: u64,
    overrides: &[OverrideEvent],
) -> Result<Vec<RolloutSample>, SimError> {
    if k == 0 {
        return Err(SimError::Config("batch needs at least one sample"));
    }
    (0..k)
        .map(|j| {
            let seed = sample_seed(base_seed, j);
            let mut s = create_session(scene, policy.clone(), config.clone(), seed)?;
            for e in overrides {
                s.schedule(*e)?;
            }
            s.run_to_horizon()?;
            Ok(RolloutSample {
                seed,
                trajectories: s.trajectories(),
                records: s.records,
            })
        })
        .collect()
}
