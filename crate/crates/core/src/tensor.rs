//! Row-major matrices and the handful of dense kernels the policy needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |r, c| self.get(r, start + c))
    }

    pub fn set_columns(&mut self, start: usize, block: &Matrix) {
        for r in 0..self.rows {
            for c in 0..block.cols {
                self.set(r, start + c, block.get(r, c));
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shapes");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = other.row(k);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shapes");
        Matrix::from_fn(self.rows, other.rows, |r, c| dot(self.row(r), other.row(c)))
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length");
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// `n x t x d` block of agent tokens, agent-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, t: usize, d: usize) -> Self {
        Self {
            n,
            t,
            d,
            data: vec![0.0; n * t * d],
        }
    }

    pub fn token(&self, i: usize, tau: usize) -> &[f64] {
        let at = (i * self.t + tau) * self.d;
        &self.data[at..at + self.d]
    }

    pub fn token_mut(&mut self, i: usize, tau: usize) -> &mut [f64] {
        let at = (i * self.t + tau) * self.d;
        &mut self.data[at..at + self.d]
    }

    /// All frames of agent `i` as a `t x d` matrix.
    pub fn agent(&self, i: usize) -> Matrix {
        let at = i * self.t * self.d;
        Matrix::from_vec(self.t, self.d, self.data[at..at + self.t * self.d].to_vec())
    }

    pub fn set_agent(&mut self, i: usize, m: &Matrix) {
        assert_eq!((m.rows, m.cols), (self.t, self.d), "agent block shape");
        let at = i * self.t * self.d;
        self.data[at..at + self.t * self.d].copy_from_slice(&m.data);
    }

    /// All agents at frame `tau` as an `n x d` matrix.
    pub fn frame(&self, tau: usize) -> Matrix {
        let mut out = Matrix::zeros(self.n, self.d);
        for i in 0..self.n {
            out.row_mut(i).copy_from_slice(self.token(i, tau));
        }
        out
    }

    pub fn set_frame(&mut self, tau: usize, m: &Matrix) {
        assert_eq!((m.rows, m.cols), (self.n, self.d), "frame block shape");
        for i in 0..self.n {
            self.token_mut(i, tau).copy_from_slice(m.row(i));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| math::exp(l - max)).sum();
    let lse = max + math::ln(sum);
    logits.iter().map(|&l| l - lse).collect()
}

/// Parameter-free RMS normalisation of every row.
pub fn rms_norm(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len().max(1) as f64;
        let scale = 1.0 / math::sqrt(ms + 1e-6);
        for v in row {
            *v *= scale;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(a.matmul(&b).data, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul_t(&b).data, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softmax_normalises() {
        let p = softmax(&[1.0, 2.0, 3.0, 1e3]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = log_softmax(&[0.0; 4]);
        assert!((l[0] + math::ln(4.0)).abs() < 1e-12);
    }

    #[test]
    fn column_blocks_round_trip() {
        let m = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let mut z = Matrix::zeros(3, 4);
        z.set_columns(0, &m.columns(0, 2));
        z.set_columns(2, &m.columns(2, 2));
        assert_eq!(z, m);
    }
}
