//! Minimal deterministic numeric kernel: dense matrices, CSR adjacency,
//! counter-based RNG, Adam, stable reductions.
//!
//! Everything here is f64. Computations are sequential or row-disjoint so
//! results are bit-identical across runs and platforms.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based splittable RNG. Draw `i` is a pure function of (seed, i),
/// so the sequence is reproducible on any platform. `split` derives an
/// independent stream without consuming state from the parent.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Derive an independent deterministic stream for a named sub-sampler.
    pub fn split(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "expected {} values for {}x{}, got {}",
                rows * cols,
                rows,
                cols,
                values.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Dense product, used as an oracle and for the d x d student weights.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidShape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self += alpha * other
    pub fn add_scaled(&mut self, other: &DenseMatrix, alpha: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Compressed-sparse-row adjacency over I+J graph nodes. Structurally
/// symmetric; column indices sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    pub dim: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub edge_values: Vec<f64>,
}

impl SparseAdjacency {
    /// Build from an entry list. Entries must form a symmetric pattern with
    /// positive finite values; duplicates are rejected.
    pub fn from_entries(dim: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; dim + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut edge_values = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if r >= dim || c >= dim {
                return Err(Error::InvalidShape(format!(
                    "entry ({r},{c}) out of range for dim {dim}"
                )));
            }
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "adjacency value at ({r},{c}) must be positive finite, got {v}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::InvalidInput(format!("duplicate entry ({r},{c})")));
            }
            prev = Some((r, c));
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            edge_values.push(v);
        }
        for i in 0..dim {
            row_offsets[i + 1] += row_offsets[i];
        }
        let adj = SparseAdjacency {
            dim,
            row_offsets,
            col_indices,
            edge_values,
        };
        adj.check_symmetric()?;
        Ok(adj)
    }

    fn check_symmetric(&self) -> Result<()> {
        for r in 0..self.dim {
            for idx in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[idx];
                if self.find(c, r).is_none() {
                    return Err(Error::InvalidInput(format!(
                        "asymmetric pattern: ({r},{c}) present but ({c},{r}) missing"
                    )));
                }
            }
        }
        Ok(())
    }

    fn find(&self, r: usize, c: usize) -> Option<usize> {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        self.col_indices[lo..hi]
            .binary_search(&c)
            .ok()
            .map(|i| lo + i)
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Dense copy, for small-graph oracles.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for idx in self.row_offsets[r]..self.row_offsets[r + 1] {
                out.set(r, self.col_indices[idx], self.edge_values[idx]);
            }
        }
        out
    }
}

/// Xavier (Glorot) uniform init: entries in [-sqrt(6/(rows+cols)), +sqrt(..)].
pub fn xavier_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape(format!(
            "xavier_init with zero dimension: {rows}x{cols}"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in &mut m.values {
        *v = rng.uniform(-bound, bound);
    }
    Ok(m)
}

/// Sparse-dense product adj * x.
pub fn spmm(adj: &SparseAdjacency, x: &DenseMatrix) -> Result<DenseMatrix> {
    if adj.dim != x.rows {
        return Err(Error::InvalidShape(format!(
            "spmm: adjacency dim {} vs matrix rows {}",
            adj.dim, x.rows
        )));
    }
    let mut out = DenseMatrix::zeros(x.rows, x.cols);
    for r in 0..adj.dim {
        let out_row = &mut out.values[r * x.cols..(r + 1) * x.cols];
        for idx in adj.row_offsets[r]..adj.row_offsets[r + 1] {
            let c = adj.col_indices[idx];
            let w = adj.edge_values[idx];
            let x_row = x.row(c);
            for (o, &xv) in out_row.iter_mut().zip(x_row) {
                *o += w * xv;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("spmm output".into()));
    }
    Ok(out)
}

/// Adam moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place. Rejects non-finite gradients without
/// touching the parameter or the moments.
pub fn adam_step(
    param: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if param.rows != grad.rows || param.cols != grad.cols {
        return Err(Error::InvalidShape(format!(
            "adam_step: param {}x{} vs grad {}x{}",
            param.rows, param.cols, grad.rows, grad.cols
        )));
    }
    if param.values.len() != state.first_moment.len() {
        return Err(Error::InvalidShape(
            "adam_step: state size does not match parameter".into(),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("adam_step gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..param.values.len() {
        let g = grad.values[i];
        let m = &mut state.first_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        let v = &mut state.second_moment[i];
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        param.values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// log(sum(exp(v))) with max subtraction.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("logsumexp of empty array".into()));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm2(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm2(u);
    let nv = norm2(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine of zero-norm vector".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
