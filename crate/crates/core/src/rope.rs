//! Rotary position embeddings (temporal, planar and directional) and
//! multi-head scaled dot-product attention over rotated queries and keys.
//!
//! Slice `i` (zero-based) of a `d`-dimensional token is rotated by
//! `p * base^(-2(i+1)/d)`. The planar variant splits every 4-group into an
//! x pair and a y pair and rotates each like a 1D embedding of dimension
//! `d/2`. The directional variant rotates every pair by the raw heading.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{dot, Matrix};

pub const DEFAULT_BASE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RopeError {
    #[error("token dimension {dim} must be a multiple of {multiple}")]
    Dimension { dim: usize, multiple: usize },
    #[error("{tokens} tokens but {positions} positions")]
    PositionCount { tokens: usize, positions: usize },
    #[error("non-finite position")]
    NonFinite,
    #[error("frequency base must exceed 1")]
    BadBase,
    #[error("attention shape mismatch: {0}")]
    Shape(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RopeVariant {
    Temporal1d,
    Spatial2d,
    Directional,
}

impl RopeVariant {
    fn multiple(self) -> usize {
        match self {
            RopeVariant::Spatial2d => 4,
            _ => 2,
        }
    }
}

/// Position payload of one token; each variant reads its own fields.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TokenPosition {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl TokenPosition {
    pub fn at_time(time: f64) -> Self {
        Self {
            time,
            ..Self::default()
        }
    }

    pub fn pose(x: f64, y: f64, heading: f64) -> Self {
        Self {
            time: 0.0,
            x,
            y,
            heading,
        }
    }

    fn is_finite(&self) -> bool {
        self.time.is_finite() && self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

/// One variant per attention head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RopeSpec {
    pub base: f64,
    pub heads: Vec<RopeVariant>,
}

impl RopeSpec {
    pub fn uniform(variant: RopeVariant, heads: usize) -> Self {
        Self {
            base: DEFAULT_BASE,
            heads: vec![variant; heads],
        }
    }

    /// The first `spatial` heads are planar, the rest directional.
    pub fn mixed(heads: usize, spatial: usize) -> Self {
        Self {
            base: DEFAULT_BASE,
            heads: (0..heads)
                .map(|h| if h < spatial { RopeVariant::Spatial2d } else { RopeVariant::Directional })
                .collect(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), RopeError> {
        if !(self.base > 1.0) {
            return Err(RopeError::BadBase);
        }
        if self.heads.is_empty() || dim % self.heads.len() != 0 {
            return Err(RopeError::Dimension {
                dim,
                multiple: self.heads.len().max(1),
            });
        }
        let head_dim = dim / self.heads.len();
        for v in &self.heads {
            if head_dim % v.multiple() != 0 {
                return Err(RopeError::Dimension {
                    dim: head_dim,
                    multiple: v.multiple(),
                });
            }
        }
        Ok(())
    }
}

/// `base^(-2(i+1)/d)` for slice `i`.
pub fn frequency(base: f64, i: usize, d: usize) -> f64 {
    math::powf(base, -2.0 * (i + 1) as f64 / d as f64)
}

#[inline]
fn rotate_pair(v: &mut [f64], i: usize, angle: f64) {
    let (s, c) = (math::sin(angle), math::cos(angle));
    let (a, b) = (v[i], v[i + 1]);
    v[i] = c * a - s * b;
    v[i + 1] = s * a + c * b;
}

fn rotate_1d(v: &mut [f64], p: f64, base: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        rotate_pair(v, 2 * i, p * frequency(base, i, d));
    }
}

fn rotate_2d(v: &mut [f64], x: f64, y: f64, base: f64) {
    let d = v.len();
    let half = d / 2;
    for i in 0..d / 4 {
        let theta = frequency(base, i, half);
        rotate_pair(v, 4 * i, x * theta);
        rotate_pair(v, 4 * i + 2, y * theta);
    }
}

fn rotate_directional(v: &mut [f64], heading: f64) {
    for i in 0..v.len() / 2 {
        rotate_pair(v, 2 * i, heading);
    }
}

fn check(tokens: &Matrix, count: usize, multiple: usize) -> Result<(), RopeError> {
    if tokens.cols % multiple != 0 {
        return Err(RopeError::Dimension {
            dim: tokens.cols,
            multiple,
        });
    }
    if tokens.rows != count {
        return Err(RopeError::PositionCount {
            tokens: tokens.rows,
            positions: count,
        });
    }
    Ok(())
}

pub fn rope_1d(tokens: &Matrix, positions: &[f64], base: f64) -> Result<Matrix, RopeError> {
    check(tokens, positions.len(), 2)?;
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(RopeError::NonFinite);
    }
    let mut out = tokens.clone();
    for (r, &p) in positions.iter().enumerate() {
        rotate_1d(out.row_mut(r), p, base);
    }
    Ok(out)
}

pub fn rope_2d(tokens: &Matrix, positions: &[(f64, f64)], base: f64) -> Result<Matrix, RopeError> {
    check(tokens, positions.len(), 4)?;
    if positions.iter().any(|(x, y)| !(x.is_finite() && y.is_finite())) {
        return Err(RopeError::NonFinite);
    }
    let mut out = tokens.clone();
    for (r, &(x, y)) in positions.iter().enumerate() {
        rotate_2d(out.row_mut(r), x, y, base);
    }
    Ok(out)
}

pub fn rope_directional(tokens: &Matrix, headings: &[f64]) -> Result<Matrix, RopeError> {
    check(tokens, headings.len(), 2)?;
    if headings.iter().any(|h| !h.is_finite()) {
        return Err(RopeError::NonFinite);
    }
    let mut out = tokens.clone();
    for (r, &h) in headings.iter().enumerate() {
        rotate_directional(out.row_mut(r), h);
    }
    Ok(out)
}

/// Rotates each head's column block with that head's variant.
pub fn apply_rope(tokens: &Matrix, positions: &[TokenPosition], spec: &RopeSpec) -> Result<Matrix, RopeError> {
    spec.validate(tokens.cols)?;
    check(tokens, positions.len(), 1)?;
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(RopeError::NonFinite);
    }
    let head_dim = tokens.cols / spec.heads.len();
    let mut out = tokens.clone();
    for (r, p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (h, variant) in spec.heads.iter().enumerate() {
            let block = &mut row[h * head_dim..(h + 1) * head_dim];
            match variant {
                RopeVariant::Temporal1d => rotate_1d(block, p.time, spec.base),
                RopeVariant::Spatial2d => rotate_2d(block, p.x, p.y, spec.base),
                RopeVariant::Directional => rotate_directional(block, p.heading),
            }
        }
    }
    Ok(out)
}

/// Which query/key pairs may interact.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allowed.push(f(q, k));
            }
        }
        Self { rows, cols, allowed }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// Scaled dot products per head; masked entries are `-inf`.
    pub scores: Vec<Matrix>,
    /// Softmax weights per head; masked entries are 0.
    pub weights: Vec<Matrix>,
    /// Queries with no visible key; their output rows are zero.
    pub empty_rows: Vec<usize>,
}

/// Multi-head attention over rotated `q` and `k` with unrotated `v`.
///
/// Head `h` owns columns `h*d_h..(h+1)*d_h` of `q`, `k` and `v`.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    q_pos: &[TokenPosition],
    k_pos: &[TokenPosition],
    spec: &RopeSpec,
    mask: Option<&Mask>,
) -> Result<AttentionOutput, RopeError> {
    if q.cols != k.cols {
        return Err(RopeError::Shape("query and key widths differ"));
    }
    if k.rows != v.rows {
        return Err(RopeError::Shape("key and value counts differ"));
    }
    if v.cols % spec.heads.len().max(1) != 0 {
        return Err(RopeError::Shape("value width not divisible by head count"));
    }
    if let Some(m) = mask {
        if (m.rows, m.cols) != (q.rows, k.rows) {
            return Err(RopeError::Shape("mask shape"));
        }
    }
    let qr = apply_rope(q, q_pos, spec)?;
    let kr = apply_rope(k, k_pos, spec)?;
    let heads = spec.heads.len();
    let dh = q.cols / heads;
    let dv = v.cols / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut output = Matrix::zeros(q.rows, v.cols);
    let mut scores = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut empty_rows = Vec::new();
    for h in 0..heads {
        let mut s = Matrix::from_vec(q.rows, k.rows, vec![f64::NEG_INFINITY; q.rows * k.rows]);
        let mut w = Matrix::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let qi = &qr.row(i)[h * dh..(h + 1) * dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..k.rows {
                if mask.is_none_or(|m| m.allows(i, j)) {
                    let sc = dot(qi, &kr.row(j)[h * dh..(h + 1) * dh]) * scale;
                    s.set(i, j, sc);
                    max = max.max(sc);
                }
            }
            if max == f64::NEG_INFINITY {
                if h == 0 {
                    empty_rows.push(i);
                }
                continue;
            }
            let mut sum = 0.0;
            for j in 0..k.rows {
                if mask.is_none_or(|m| m.allows(i, j)) {
                    let e = math::exp(s.get(i, j) - max);
                    w.set(i, j, e);
                    sum += e;
                }
            }
            let out = &mut output.row_mut(i)[h * dv..(h + 1) * dv];
            for j in 0..k.rows {
                let wij = w.get(i, j);
                if wij == 0.0 {
                    continue;
                }
                let wn = wij / sum;
                w.set(i, j, wn);
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[h * dv..(h + 1) * dv]) {
                    *o += wn * vv;
                }
            }
        }
        scores.push(s);
        weights.push(w);
    }
    Ok(AttentionOutput {
        output,
        scores,
        weights,
        empty_rows,
    })
}
