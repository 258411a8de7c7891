//! Desk-scale transformer policy over discrete control actions.
//!
//! Pipeline per scene window:
//! 1. agent and map encoders (position-free token contents),
//! 2. environment fusion per frame: agent self-attention, map
//!    self-attention, agent-to-map cross-attention, all with planar and
//!    directional rotary embeddings,
//! 3. the foundation branch: causal temporal attention and the action head,
//! 4. the meta-action prediction branch: meta embeddings shifted by one
//!    frame, causal temporal attention and the meta head,
//! 5. meta-action injection: one embedding added before every temporal
//!    layer of the foundation branch and one before the action head.
//!
//! Meta-action embedding tables start at zero, so a fresh controllable
//! model computes exactly the foundation model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{MapPolyline, PolylineKind, RoadMap};
use crate::kinematics::AgentState;
use crate::labeler::MetaAction;
use crate::math;
use crate::rope::{attention, Mask, RopeError, RopeSpec, RopeVariant, TokenPosition};
use crate::scene::{AgentKind, Extents, Scene};
use crate::tensor::{log_softmax, relu, rms_norm, Matrix, Tensor3};

const AGENT_FEATURES: usize = 6;
const POINT_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("non-finite activation after {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("scene window has no agents or frames")]
    Empty,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Rope(#[from] RopeError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub env_fusion_repeats: usize,
    pub temporal_layers: usize,
    /// Layers of the meta-action prediction branch.
    pub meta_layers: usize,
    pub head_count: usize,
    /// Heads carrying planar embeddings in environment fusion; the rest
    /// are directional.
    pub spatial_heads: usize,
    pub action_bins: usize,
    pub meta_classes: usize,
    /// Maximum number of frames the policy attends over.
    pub window: usize,
    pub rope_base: f64,
    pub ffn_mult: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            env_fusion_repeats: 3,
            temporal_layers: 3,
            meta_layers: 1,
            head_count: 4,
            spatial_heads: 2,
            action_bins: 169,
            meta_classes: MetaAction::COUNT,
            window: 32,
            rope_base: crate::rope::DEFAULT_BASE,
            ffn_mult: 2,
        }
    }
}

impl PolicyConfig {
    /// D = 8, one layer everywhere, a 3 x 3 action grid.
    pub fn micro() -> Self {
        Self {
            embed_dim: 8,
            env_fusion_repeats: 1,
            temporal_layers: 1,
            meta_layers: 1,
            head_count: 2,
            spatial_heads: 1,
            action_bins: 9,
            window: 20,
            ffn_mult: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(PolicyError::Config("embed_dim must be a positive multiple of 4"));
        }
        if self.head_count == 0 || self.embed_dim % self.head_count != 0 {
            return Err(PolicyError::Config("embed_dim must be divisible by head_count"));
        }
        if (self.embed_dim / self.head_count) % 4 != 0 {
            return Err(PolicyError::Config("head dimension must be a multiple of 4"));
        }
        if self.spatial_heads > self.head_count {
            return Err(PolicyError::Config("spatial_heads exceeds head_count"));
        }
        if self.temporal_layers == 0 || self.meta_layers == 0 || self.env_fusion_repeats == 0 {
            return Err(PolicyError::Config("layer counts must be at least 1"));
        }
        if self.meta_classes != MetaAction::COUNT {
            return Err(PolicyError::Config("meta_classes must be 8"));
        }
        if self.action_bins == 0 || self.window == 0 || self.ffn_mult == 0 {
            return Err(PolicyError::Config("action_bins, window and ffn_mult must be positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(PolicyError::Config("rope_base must exceed 1"));
        }
        Ok(())
    }

    fn spatial_spec(&self) -> RopeSpec {
        RopeSpec {
            base: self.rope_base,
            ..RopeSpec::mixed(self.head_count, self.spatial_heads)
        }
    }

    fn temporal_spec(&self) -> RopeSpec {
        RopeSpec {
            base: self.rope_base,
            ..RopeSpec::uniform(RopeVariant::Temporal1d, self.head_count)
        }
    }
}

/// Named dense parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Trainable module groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    Foundation,
    MaPrediction,
    MaInjection,
}

impl Stage {
    /// Group that owns parameter `name`.
    pub fn of(name: &str) -> Stage {
        if name.starts_with("meta.") {
            Stage::MaPrediction
        } else if name.starts_with("inject.") {
            Stage::MaInjection
        } else {
            Stage::Foundation
        }
    }
}

/// Flat name to tensor map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, PolicyError> {
        self.tensors.get(name).ok_or_else(|| PolicyError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, PolicyError> {
        self.tensors.get_mut(name).ok_or_else(|| PolicyError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Zeroes every meta-action embedding table.
    pub fn zero_meta_tables(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if is_meta_table(name) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

fn is_meta_table(name: &str) -> bool {
    name.starts_with("meta.embed.") || name.starts_with("inject.embed.")
}

/// Expected parameter shapes for a config, in name order.
pub fn parameter_manifest(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let f = d * cfg.ffn_mult;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    let attn = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{prefix}.{w}"), vec![d, d]);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
        push(format!("{prefix}.w1"), vec![d, f]);
        push(format!("{prefix}.b1"), vec![f]);
        push(format!("{prefix}.w2"), vec![f, d]);
        push(format!("{prefix}.b2"), vec![d]);
    };
    push("enc.agent.w1".into(), vec![AGENT_FEATURES, d]);
    push("enc.agent.b1".into(), vec![d]);
    push("enc.agent.w2".into(), vec![d, d]);
    push("enc.agent.b2".into(), vec![d]);
    push("enc.agent.type".into(), vec![AgentKind::ALL.len(), d]);
    push("enc.map.w1".into(), vec![POINT_FEATURES, d]);
    push("enc.map.b1".into(), vec![d]);
    push("enc.map.w2".into(), vec![2 * d, d]);
    push("enc.map.b2".into(), vec![d]);
    push("enc.map.kind".into(), vec![PolylineKind::ALL.len(), d]);
    for r in 0..cfg.env_fusion_repeats {
        for part in ["agent", "map", "cross"] {
            attn(&mut push, &format!("fusion.{r}.{part}"));
        }
        ffn(&mut push, &format!("fusion.{r}.ffn"));
    }
    for l in 0..cfg.temporal_layers {
        attn(&mut push, &format!("temporal.{l}.attn"));
        ffn(&mut push, &format!("temporal.{l}.ffn"));
    }
    push("action_head.w1".into(), vec![d, d]);
    push("action_head.b1".into(), vec![d]);
    push("action_head.w2".into(), vec![d, cfg.action_bins]);
    push("action_head.b2".into(), vec![cfg.action_bins]);
    push("meta.embed.1".into(), vec![cfg.meta_classes, d]);
    for l in 0..cfg.meta_layers {
        attn(&mut push, &format!("meta.temporal.{l}.attn"));
        ffn(&mut push, &format!("meta.temporal.{l}.ffn"));
    }
    push("meta.head.w1".into(), vec![d, d]);
    push("meta.head.b1".into(), vec![d]);
    push("meta.head.w2".into(), vec![d, cfg.meta_classes]);
    push("meta.head.b2".into(), vec![cfg.meta_classes]);
    for e in 2..=cfg.temporal_layers + 2 {
        push(format!("inject.embed.{e}"), vec![cfg.meta_classes, d]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamStore,
}

/// Agents of one scene window, `n x t` states plus attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub states: Vec<Vec<AgentState>>,
    /// State just before the first frame, used for rate features.
    pub previous: Vec<Option<AgentState>>,
    pub kinds: Vec<AgentKind>,
    pub extents: Vec<Extents>,
    /// Absolute index of the first frame (temporal embedding position).
    pub first_frame: usize,
    pub dt: f64,
}

impl PolicyInput {
    /// Frames `start..start + len` of every agent.
    pub fn from_scene(scene: &Scene, start: usize, len: usize) -> Result<Self, PolicyError> {
        if scene.agents.is_empty() || len == 0 || start + len > scene.frame_count() {
            return Err(PolicyError::Empty);
        }
        Ok(Self {
            states: scene.agents.iter().map(|a| a.track.states[start..start + len].to_vec()).collect(),
            previous: scene
                .agents
                .iter()
                .map(|a| start.checked_sub(1).map(|p| a.track.states[p]))
                .collect(),
            kinds: scene.agents.iter().map(|a| a.kind).collect(),
            extents: scene.agents.iter().map(|a| a.extents).collect(),
            first_frame: start,
            dt: scene.dt(),
        })
    }

    pub fn agent_count(&self) -> usize {
        self.states.len()
    }

    pub fn frame_count(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        let n = self.agent_count();
        let t = self.frame_count();
        if n == 0 || t == 0 {
            return Err(PolicyError::Empty);
        }
        if self.states.iter().any(|s| s.len() != t) {
            return Err(PolicyError::Shape("ragged agent tracks"));
        }
        if self.previous.len() != n || self.kinds.len() != n || self.extents.len() != n {
            return Err(PolicyError::Shape("agent attribute counts"));
        }
        if !(self.dt > 0.0) {
            return Err(PolicyError::Shape("dt must be positive"));
        }
        Ok(())
    }
}

/// Map tokens after every fusion repeat, plus their poses.
#[derive(Debug, Clone, PartialEq)]
pub struct MapContext {
    /// `per_repeat[r]` is the map seen by agents in repeat `r`.
    pub per_repeat: Vec<Matrix>,
    pub positions: Vec<TokenPosition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub env: Tensor3,
    pub history: Tensor3,
    pub c_history: Tensor3,
    pub ma_history: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Per agent, `t x action_bins`, with meta-action injection.
    pub action_logits: Vec<Matrix>,
    /// Per agent, `t x meta_classes`.
    pub meta_logits: Vec<Matrix>,
    /// Per agent, `t x action_bins`, foundation branch without injection.
    pub foundation_action_logits: Vec<Matrix>,
    pub taps: Taps,
}

fn uniform(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    rng.gen_range(-scale..=scale)
}

fn linear(x: &Matrix, w: &Tensor, b: Option<&Tensor>) -> Matrix {
    let (din, dout) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.cols, din);
    let mut out = Matrix::zeros(x.rows, dout);
    for r in 0..x.rows {
        let o = out.row_mut(r);
        if let Some(b) = b {
            o.copy_from_slice(&b.data);
        }
        for (k, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (ov, &wv) in o.iter_mut().zip(&w.data[k * dout..(k + 1) * dout]) {
                *ov += xv * wv;
            }
        }
    }
    out
}

fn embed_rows(table: &Tensor, ids: impl Iterator<Item = usize>) -> Matrix {
    let d = table.shape[1];
    let rows: Vec<Vec<f64>> = ids.map(|i| table.data[i * d..(i + 1) * d].to_vec()).collect();
    let mut m = Matrix::from_rows(&rows);
    if rows.is_empty() {
        m.cols = d;
    }
    m
}

fn finite(m: &Matrix, layer: &'static str) -> Result<(), PolicyError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::NonFinite(layer))
    }
}

fn check_meta(meta: &[Vec<MetaAction>], n: usize, t: usize) -> Result<(), PolicyError> {
    if meta.len() != n || meta.iter().any(|m| m.len() != t) {
        return Err(PolicyError::Shape("meta history must be n x t"));
    }
    Ok(())
}

impl Policy {
    /// Seeded initialisation; meta-action embedding tables start at zero.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape) in parameter_manifest(&config) {
            let mut t = Tensor::zeros(&shape);
            let bias = shape.len() == 1;
            if !bias && !is_meta_table(&name) {
                let scale = if name.ends_with(".type") || name.ends_with(".kind") {
                    0.5
                } else {
                    1.0 / math::sqrt(shape[0] as f64)
                };
                t.data.iter_mut().for_each(|v| *v = uniform(&mut rng, scale));
            }
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Checks that `params` has exactly the manifest's names and shapes.
    pub fn from_params(config: PolicyConfig, params: ParamStore) -> Result<Self, PolicyError> {
        config.validate()?;
        let manifest = parameter_manifest(&config);
        if manifest.len() != params.len() {
            return Err(PolicyError::Shape("parameter count does not match config"));
        }
        for (name, shape) in &manifest {
            let t = params.get(name)?;
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(PolicyError::Shape("parameter shape does not match config"));
            }
        }
        Ok(Self { config, params })
    }

    fn p(&self, name: &str) -> Result<&Tensor, PolicyError> {
        self.params.get(name)
    }

    fn mha(
        &self,
        prefix: &str,
        q_in: &Matrix,
        kv_in: &Matrix,
        q_pos: &[TokenPosition],
        k_pos: &[TokenPosition],
        spec: &RopeSpec,
        mask: Option<&Mask>,
    ) -> Result<Matrix, PolicyError> {
        let q = linear(q_in, self.p(&format!("{prefix}.wq"))?, None);
        let k = linear(kv_in, self.p(&format!("{prefix}.wk"))?, None);
        let v = linear(kv_in, self.p(&format!("{prefix}.wv"))?, None);
        let att = attention(&q, &k, &v, q_pos, k_pos, spec, mask)?;
        Ok(linear(&att.output, self.p(&format!("{prefix}.wo"))?, None))
    }

    fn ffn(&self, prefix: &str, x: &Matrix) -> Result<Matrix, PolicyError> {
        let h = linear(x, self.p(&format!("{prefix}.w1"))?, Some(self.p(&format!("{prefix}.b1"))?)).map(relu);
        Ok(linear(&h, self.p(&format!("{prefix}.w2"))?, Some(self.p(&format!("{prefix}.b2"))?)))
    }

    fn head(&self, prefix: &str, x: &Matrix) -> Result<Matrix, PolicyError> {
        let h = linear(&rms_norm(x), self.p(&format!("{prefix}.w1"))?, Some(self.p(&format!("{prefix}.b1"))?)).map(relu);
        Ok(linear(&h, self.p(&format!("{prefix}.w2"))?, Some(self.p(&format!("{prefix}.b2"))?)))
    }

    /// Agent tokens for one frame from speed, rates and extents.
    pub fn encode_frame(
        &self,
        states: &[AgentState],
        previous: &[Option<AgentState>],
        kinds: &[AgentKind],
        extents: &[Extents],
        dt: f64,
    ) -> Result<Matrix, PolicyError> {
        let feats: Vec<Vec<f64>> = states
            .iter()
            .zip(previous)
            .zip(extents)
            .map(|((s, prev), e)| {
                let (acc, yaw) = prev.map_or((0.0, 0.0), |p| {
                    ((s.speed - p.speed) / dt, math::normalize_angle(s.heading - p.heading) / dt)
                });
                vec![s.speed / 10.0, acc / 6.0, yaw / 0.6, e.length / 5.0, e.width / 2.0, e.height / 2.0]
            })
            .collect();
        let x = Matrix::from_rows(&feats);
        let h = linear(&x, self.p("enc.agent.w1")?, Some(self.p("enc.agent.b1")?)).map(relu);
        let mut out = linear(&h, self.p("enc.agent.w2")?, Some(self.p("enc.agent.b2")?));
        out.add_assign(&embed_rows(self.p("enc.agent.type")?, kinds.iter().map(|k| k.index())));
        finite(&out, "agent encoder")?;
        Ok(out)
    }

    /// Map tokens from local-frame point features pooled by mean and max.
    pub fn encode_map(&self, map: &RoadMap) -> Result<(Matrix, Vec<TokenPosition>), PolicyError> {
        let d = self.config.embed_dim;
        let lines = map.polylines();
        let mut tokens = Matrix::zeros(lines.len(), d);
        let mut positions = Vec::with_capacity(lines.len());
        for (k, line) in lines.iter().enumerate() {
            let (center, heading) = line.midpoint_frame();
            positions.push(TokenPosition::pose(center.x, center.y, heading));
            let h = linear(
                &local_point_features(line, center.x, center.y, heading),
                self.p("enc.map.w1")?,
                Some(self.p("enc.map.b1")?),
            )
            .map(relu);
            let mut pooled = vec![0.0; 2 * d];
            for c in 0..d {
                let col = (0..h.rows).map(|r| h.get(r, c));
                pooled[c] = col.clone().sum::<f64>() / h.rows as f64;
                pooled[d + c] = col.fold(f64::NEG_INFINITY, f64::max);
            }
            let mut tok = linear(&Matrix::from_vec(1, 2 * d, pooled), self.p("enc.map.w2")?, Some(self.p("enc.map.b2")?));
            tok.add_assign(&embed_rows(self.p("enc.map.kind")?, core::iter::once(line.kind.index())));
            tokens.row_mut(k).copy_from_slice(tok.row(0));
        }
        finite(&tokens, "map encoder")?;
        Ok((tokens, positions))
    }

    /// Agent tokens `n x t x d` and map tokens `k x d`.
    pub fn encode_scene(&self, input: &PolicyInput, map: &RoadMap) -> Result<(Tensor3, Matrix), PolicyError> {
        input.validate()?;
        let (n, t, d) = (input.agent_count(), input.frame_count(), self.config.embed_dim);
        let mut agents = Tensor3::zeros(n, t, d);
        for tau in 0..t {
            let (states, previous) = frame_slices(input, tau);
            agents.set_frame(tau, &self.encode_frame(&states, &previous, &input.kinds, &input.extents, input.dt)?);
        }
        Ok((agents, self.encode_map(map)?.0))
    }

    /// Map self-attention for every fusion repeat.
    pub fn map_context(&self, map: &RoadMap) -> Result<MapContext, PolicyError> {
        let (mut m, positions) = self.encode_map(map)?;
        let spec = self.config.spatial_spec();
        let mut per_repeat = Vec::with_capacity(self.config.env_fusion_repeats);
        for r in 0..self.config.env_fusion_repeats {
            if m.rows > 0 {
                let upd = self.mha(&format!("fusion.{r}.map"), &rms_norm(&m), &rms_norm(&m), &positions, &positions, &spec, None)?;
                m.add_assign(&upd);
                finite(&m, "map self-attention")?;
            }
            per_repeat.push(m.clone());
        }
        Ok(MapContext { per_repeat, positions })
    }

    /// Environment fusion of one frame's agent tokens.
    pub fn fuse_frame(&self, tokens: &Matrix, poses: &[AgentState], ctx: &MapContext) -> Result<Matrix, PolicyError> {
        let spec = self.config.spatial_spec();
        let pos: Vec<TokenPosition> = poses.iter().map(|s| TokenPosition::pose(s.x, s.y, s.heading)).collect();
        let mut x = tokens.clone();
        for (r, map) in ctx.per_repeat.iter().enumerate() {
            let nx = rms_norm(&x);
            x.add_assign(&self.mha(&format!("fusion.{r}.agent"), &nx, &nx, &pos, &pos, &spec, None)?);
            finite(&x, "agent self-attention")?;
            if map.rows > 0 {
                let upd = self.mha(&format!("fusion.{r}.cross"), &rms_norm(&x), &rms_norm(map), &pos, &ctx.positions, &spec, None)?;
                x.add_assign(&upd);
                finite(&x, "agent-map cross-attention")?;
            }
            x.add_assign(&self.ffn(&format!("fusion.{r}.ffn"), &rms_norm(&x))?);
            finite(&x, "fusion feedforward")?;
        }
        Ok(x)
    }

    /// Environment-fused tokens for a whole window.
    pub fn env_fusion(&self, input: &PolicyInput, map: &RoadMap) -> Result<Tensor3, PolicyError> {
        let (agents, _) = self.encode_scene(input, map)?;
        let ctx = self.map_context(map)?;
        let mut env = agents.clone();
        for tau in 0..input.frame_count() {
            let poses: Vec<AgentState> = input.states.iter().map(|s| s[tau]).collect();
            env.set_frame(tau, &self.fuse_frame(&agents.frame(tau), &poses, &ctx)?);
        }
        Ok(env)
    }

    fn temporal_stack(
        &self,
        prefix: &str,
        layers: usize,
        x: &mut Matrix,
        first_frame: usize,
        inject: Option<&dyn Fn(usize) -> Result<Matrix, PolicyError>>,
    ) -> Result<(), PolicyError> {
        let spec = self.config.temporal_spec();
        let pos: Vec<TokenPosition> = (0..x.rows).map(|t| TokenPosition::at_time((first_frame + t) as f64)).collect();
        let mask = Mask::causal(x.rows);
        for l in 0..layers {
            if let Some(f) = inject {
                x.add_assign(&f(l)?);
            }
            let nx = rms_norm(x);
            x.add_assign(&self.mha(&format!("{prefix}.{l}.attn"), &nx, &nx, &pos, &pos, &spec, Some(&mask))?);
            x.add_assign(&self.ffn(&format!("{prefix}.{l}.ffn"), &rms_norm(x))?);
            finite(x, "temporal attention")?;
        }
        Ok(())
    }

    fn meta_table(&self, name: &str, meta: &[MetaAction]) -> Result<Matrix, PolicyError> {
        Ok(embed_rows(self.p(name)?, meta.iter().map(|m| m.index())))
    }

    /// History tokens and action logits; with `meta`, injection is applied.
    pub fn action_branch(
        &self,
        env: &Tensor3,
        meta: Option<&[Vec<MetaAction>]>,
        first_frame: usize,
    ) -> Result<(Tensor3, Vec<Matrix>), PolicyError> {
        if let Some(m) = meta {
            check_meta(m, env.n, env.t)?;
        }
        let mut hist = Tensor3::zeros(env.n, env.t, env.d);
        let mut logits = Vec::with_capacity(env.n);
        let layers = self.config.temporal_layers;
        for i in 0..env.n {
            let mut x = env.agent(i);
            match meta {
                Some(m) => {
                    let inject = |l: usize| self.meta_table(&format!("inject.embed.{}", l + 2), &m[i]);
                    self.temporal_stack("temporal", layers, &mut x, first_frame, Some(&inject))?;
                    x.add_assign(&self.meta_table(&format!("inject.embed.{}", layers + 2), &m[i])?);
                }
                None => self.temporal_stack("temporal", layers, &mut x, first_frame, None)?,
            }
            let out = self.head("action_head", &x)?;
            finite(&out, "action head")?;
            hist.set_agent(i, &x);
            logits.push(out);
        }
        Ok((hist, logits))
    }

    /// Meta-action logits; frame `t` sees meta-actions `< t` only.
    pub fn meta_branch(
        &self,
        env: &Tensor3,
        meta: &[Vec<MetaAction>],
        first_frame: usize,
    ) -> Result<(Tensor3, Vec<Matrix>), PolicyError> {
        check_meta(meta, env.n, env.t)?;
        let mut hist = Tensor3::zeros(env.n, env.t, env.d);
        let mut logits = Vec::with_capacity(env.n);
        for i in 0..env.n {
            let emb = self.meta_table("meta.embed.1", &meta[i])?;
            let mut x = env.agent(i);
            for tau in 1..env.t {
                for (a, b) in x.row_mut(tau).iter_mut().zip(emb.row(tau - 1)) {
                    *a += b;
                }
            }
            self.temporal_stack("meta.temporal", self.config.meta_layers, &mut x, first_frame, None)?;
            let out = self.head("meta.head", &x)?;
            finite(&out, "meta head")?;
            hist.set_agent(i, &x);
            logits.push(out);
        }
        Ok((hist, logits))
    }

    /// Full controllable forward pass.
    pub fn forward(&self, input: &PolicyInput, map: &RoadMap, meta: &[Vec<MetaAction>]) -> Result<ForwardOutput, PolicyError> {
        let env = self.env_fusion(input, map)?;
        check_meta(meta, env.n, env.t)?;
        let (history, foundation_action_logits) = self.action_branch(&env, None, input.first_frame)?;
        let (ma_history, action_logits) = self.action_branch(&env, Some(meta), input.first_frame)?;
        let (c_history, meta_logits) = self.meta_branch(&env, meta, input.first_frame)?;
        Ok(ForwardOutput {
            action_logits,
            meta_logits,
            foundation_action_logits,
            taps: Taps {
                env,
                history,
                c_history,
                ma_history,
            },
        })
    }

    /// Foundation action logits only.
    pub fn forward_foundation(&self, input: &PolicyInput, map: &RoadMap) -> Result<Vec<Matrix>, PolicyError> {
        let env = self.env_fusion(input, map)?;
        Ok(self.action_branch(&env, None, input.first_frame)?.1)
    }
}

fn frame_slices(input: &PolicyInput, tau: usize) -> (Vec<AgentState>, Vec<Option<AgentState>>) {
    let states = input.states.iter().map(|s| s[tau]).collect();
    let previous = input
        .states
        .iter()
        .zip(&input.previous)
        .map(|(s, p)| if tau == 0 { *p } else { Some(s[tau - 1]) })
        .collect();
    (states, previous)
}

fn local_point_features(line: &MapPolyline, cx: f64, cy: f64, heading: f64) -> Matrix {
    let (s, c) = (math::sin(heading), math::cos(heading));
    let pts = &line.points;
    let rows: Vec<Vec<f64>> = (0..pts.len())
        .map(|i| {
            let (a, b) = if i + 1 < pts.len() { (pts[i], pts[i + 1]) } else { (pts[i - 1], pts[i]) };
            let dir = math::atan2(b.y - a.y, b.x - a.x) - heading;
            let (dx, dy) = (pts[i].x - cx, pts[i].y - cy);
            vec![(c * dx + s * dy) / 10.0, (-s * dx + c * dy) / 10.0, math::cos(dir), math::sin(dir)]
        })
        .collect();
    Matrix::from_rows(&rows)
}

/// Mean cross-entropy over unmasked agent-frames.
pub fn cross_entropy(logits: &[Matrix], labels: &[Vec<usize>], mask: Option<&[Vec<bool>]>) -> Result<f64, PolicyError> {
    if logits.len() != labels.len() {
        return Err(PolicyError::Shape("logits and labels differ in agent count"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (l, y)) in logits.iter().zip(labels).enumerate() {
        if l.rows != y.len() {
            return Err(PolicyError::Shape("logits and labels differ in frame count"));
        }
        for (t, &label) in y.iter().enumerate() {
            if label >= l.cols {
                return Err(PolicyError::LabelRange { label, classes: l.cols });
            }
            if mask.is_some_and(|m| !m[i][t]) {
                continue;
            }
            total -= log_softmax(l.row(t))[label];
            count += 1;
        }
    }
    if count == 0 {
        return Err(PolicyError::Empty);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub foundation: f64,
    pub ma_prediction: f64,
    pub ma_injection: f64,
}

pub fn losses(
    output: &ForwardOutput,
    action_labels: &[Vec<usize>],
    meta_labels: &[Vec<MetaAction>],
    mask: Option<&[Vec<bool>]>,
) -> Result<Losses, PolicyError> {
    let meta: Vec<Vec<usize>> = meta_labels.iter().map(|m| m.iter().map(|c| c.index()).collect()).collect();
    Ok(Losses {
        foundation: cross_entropy(&output.foundation_action_logits, action_labels, mask)?,
        ma_prediction: cross_entropy(&output.meta_logits, &meta, mask)?,
        ma_injection: cross_entropy(&output.action_logits, action_labels, mask)?,
    })
}

/// One training scene with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSample {
    pub input: PolicyInput,
    pub map: RoadMap,
    pub actions: Vec<Vec<usize>>,
    pub meta: Vec<Vec<MetaAction>>,
    pub mask: Option<Vec<Vec<bool>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroFitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Central-difference step.
    pub fd_step: f64,
    pub max_trainable: usize,
    /// Halvings tried before a step is given up.
    pub max_backtracks: usize,
    /// Stop once the loss falls below this fraction of the initial loss.
    pub stop_ratio: Option<f64>,
}

impl Default for MicroFitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            fd_step: 1e-5,
            max_trainable: 200,
            max_backtracks: 12,
            stop_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitCurve {
    /// Loss before the first step and after every step.
    pub losses: Vec<f64>,
    pub trainable: usize,
    /// True when a step found no decrease within the backtracking budget.
    pub stalled: bool,
}

/// Parameters a stage updates in micro fitting.
pub fn trainable_parameters(cfg: &PolicyConfig, stage: Stage) -> Vec<String> {
    match stage {
        Stage::Foundation => {
            let last = cfg.temporal_layers - 1;
            let mut names = vec![format!("temporal.{last}.attn.wo")];
            names.extend(["action_head.b1", "action_head.w2", "action_head.b2"].map(String::from));
            names
        }
        Stage::MaPrediction => ["meta.embed.1", "meta.head.w2", "meta.head.b2"].into_iter().map(String::from).collect(),
        Stage::MaInjection => (2..=cfg.temporal_layers + 2).map(|e| format!("inject.embed.{e}")).collect(),
    }
}

struct Cached<'a> {
    sample: &'a FitSample,
    env: Tensor3,
}

fn stage_loss_cached(policy: &Policy, data: &[Cached<'_>], stage: Stage) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for c in data {
        let s = c.sample;
        let first = s.input.first_frame;
        let mask = s.mask.as_deref();
        total += match stage {
            Stage::Foundation => cross_entropy(&policy.action_branch(&c.env, None, first)?.1, &s.actions, mask)?,
            Stage::MaInjection => cross_entropy(&policy.action_branch(&c.env, Some(&s.meta), first)?.1, &s.actions, mask)?,
            Stage::MaPrediction => {
                let labels: Vec<Vec<usize>> = s.meta.iter().map(|m| m.iter().map(|c| c.index()).collect()).collect();
                cross_entropy(&policy.meta_branch(&c.env, &s.meta, first)?.1, &labels, mask)?
            }
        };
    }
    Ok(total / data.len() as f64)
}

/// Mean stage loss over `data`.
pub fn stage_loss(policy: &Policy, data: &[FitSample], stage: Stage) -> Result<f64, PolicyError> {
    let cached = cache_env(policy, data)?;
    stage_loss_cached(policy, &cached, stage)
}

fn cache_env<'a>(policy: &Policy, data: &'a [FitSample]) -> Result<Vec<Cached<'a>>, PolicyError> {
    if data.is_empty() {
        return Err(PolicyError::Empty);
    }
    data.iter()
        .map(|s| {
            Ok(Cached {
                sample: s,
                env: policy.env_fusion(&s.input, &s.map)?,
            })
        })
        .collect()
}

/// Adam-scaled descent on central finite-difference gradients with
/// backtracking, so the loss never increases. Only the stage's trainable
/// subset moves; every other parameter is left untouched.
pub fn micro_fit(policy: &mut Policy, data: &[FitSample], stage: Stage, cfg: &MicroFitConfig) -> Result<FitCurve, PolicyError> {
    let names = trainable_parameters(&policy.config, stage);
    let trainable: usize = names.iter().map(|n| policy.params.get(n).map(|t| t.data.len())).sum::<Result<_, _>>()?;
    if trainable > cfg.max_trainable {
        return Err(PolicyError::Config("stage has more trainable scalars than max_trainable"));
    }
    let frozen = policy.clone();
    let cached = cache_env(&frozen, data)?;
    let mut loss = stage_loss_cached(policy, &cached, stage)?;
    let mut losses = vec![loss];
    let mut lr = cfg.learning_rate;
    let mut stalled = false;
    let mut first: Vec<Vec<f64>> = names
        .iter()
        .map(|n| policy.params.get(n).map(|t| vec![0.0; t.data.len()]))
        .collect::<Result<_, _>>()?;
    let mut second = first.clone();
    let mut step = 0u32;
    for _ in 0..cfg.steps {
        if cfg.stop_ratio.is_some_and(|r| loss < r * losses[0]) {
            break;
        }
        let mut grad: Vec<Vec<f64>> = Vec::with_capacity(names.len());
        for name in &names {
            let len = policy.params.get(name)?.data.len();
            let mut g = vec![0.0; len];
            for (k, gk) in g.iter_mut().enumerate() {
                let orig = policy.params.get(name)?.data[k];
                policy.params.get_mut(name)?.data[k] = orig + cfg.fd_step;
                let up = stage_loss_cached(policy, &cached, stage)?;
                policy.params.get_mut(name)?.data[k] = orig - cfg.fd_step;
                let down = stage_loss_cached(policy, &cached, stage)?;
                policy.params.get_mut(name)?.data[k] = orig;
                *gk = (up - down) / (2.0 * cfg.fd_step);
            }
            grad.push(g);
        }
        step += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let dirs: Vec<Vec<f64>> = grad
            .iter()
            .zip(first.iter_mut().zip(second.iter_mut()))
            .map(|(g, (m, v))| {
                g.iter()
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .map(|(&gk, (mk, vk))| {
                        *mk = b1 * *mk + (1.0 - b1) * gk;
                        *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                        let mh = *mk / (1.0 - math::powf(b1, step as f64));
                        let vh = *vk / (1.0 - math::powf(b2, step as f64));
                        mh / (math::sqrt(vh) + 1e-8)
                    })
                    .collect()
            })
            .collect();
        let gmax = grad.iter().flatten().fold(0.0f64, |m, g| m.max(math::abs(*g)));
        let steepest: Vec<Vec<f64>> = grad.iter().map(|g| g.iter().map(|v| v / gmax.max(1e-300)).collect()).collect();
        let saved: Vec<Vec<f64>> = names
            .iter()
            .map(|n| policy.params.get(n).map(|t| t.data.clone()))
            .collect::<Result<_, _>>()?;
        let mut accepted = false;
        for (which, dir) in [&dirs, &steepest].into_iter().enumerate() {
            let mut rate = if which == 0 { lr } else { cfg.learning_rate };
            for _ in 0..=cfg.max_backtracks {
                for ((name, g), orig) in names.iter().zip(dir).zip(&saved) {
                    let t = policy.params.get_mut(name)?;
                    for ((v, &o), &gv) in t.data.iter_mut().zip(orig).zip(g) {
                        *v = o - rate * gv;
                    }
                }
                let trial = stage_loss_cached(policy, &cached, stage)?;
                if trial < loss {
                    loss = trial;
                    accepted = true;
                    break;
                }
                rate *= 0.5;
            }
            if accepted {
                if which == 0 {
                    lr = (rate * 1.2).min(cfg.learning_rate);
                }
                break;
            }
        }
        if !accepted {
            for (name, orig) in names.iter().zip(&saved) {
                policy.params.get_mut(name)?.data.clone_from(orig);
            }
            stalled = true;
            losses.push(loss);
            break;
        }
        losses.push(loss);
    }
    Ok(FitCurve {
        losses,
        trainable,
        stalled,
    })
}
