//! Reference kernels for vanilla linear attention.
//!
//! Three equivalent computation forms over a single head of dimension `d`:
//!
//! * parallel — outputs for a block of tokens straight from their queries,
//!   keys and values under a causal mask; no state is touched.
//! * recurrent — a fixed-size `d x d` state accumulates key/value outer
//!   products one token at a time.
//! * chunkwise — outputs combine a stale chunk-start state with intra-chunk
//!   key/value terms; the state is advanced once per chunk.
//!
//! All arithmetic is `f64`. The `mixed` precision tag only emulates storage
//! widths (state rounded through `f32`, per-token vectors through `f16` at
//! store boundaries) so that byte accounting matches what would actually be
//! resident; it is not a compute-accuracy claim. Intra-chunk sums always run
//! in ascending token order so tolerance-based checks are reproducible.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{all_finite, axpy, dot, Mat};

/// Numeric-format tag for stored tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    /// Everything stored in `f64`; stores are exact.
    #[default]
    Fp64Reference,
    /// State stored as `f32`, per-token vectors as `f16`; values are rounded
    /// through those formats whenever they are written to a pool.
    Mixed,
}

impl Precision {
    /// Round a value through the state storage format.
    pub fn round_state(self, x: f64) -> f64 {
        match self {
            Precision::Fp64Reference => x,
            Precision::Mixed => x as f32 as f64,
        }
    }

    /// Round a value through the per-token (k/v/u) storage format.
    pub fn round_kv(self, x: f64) -> f64 {
        match self {
            Precision::Fp64Reference => x,
            Precision::Mixed => f16::from_f64(x).to_f64(),
        }
    }
}

/// Per-head attention configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    /// Head dimension `d`.
    pub head_dim: usize,
    /// Buffer/chunk size `m` for chunkwise decoding.
    pub chunk_size: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl AttnConfig {
    pub fn new(head_dim: usize, chunk_size: usize, precision: Precision) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::invalid_input("head_dim must be >= 1"));
        }
        if chunk_size == 0 {
            return Err(Error::invalid_input("chunk_size must be >= 1"));
        }
        Ok(AttnConfig {
            head_dim,
            chunk_size,
            precision,
        })
    }
}

/// The `d x d` linear attention state for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    dim: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl HeadState {
    pub fn zeros(dim: usize, precision: Precision) -> Self {
        HeadState {
            dim,
            precision,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Build from raw row-major entries, rounding through the state format.
    pub fn from_entries(dim: usize, precision: Precision, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::invalid_input(format!(
                "state needs {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if !all_finite(entries) {
            return Err(Error::invalid_input("state entries must be finite"));
        }
        Ok(HeadState {
            dim,
            precision,
            data: entries.iter().map(|&x| precision.round_state(x)).collect(),
        })
    }

    /// `o = q S` (row vector times state).
    pub fn query(&self, q: &[f64]) -> Vec<f64> {
        debug_assert_eq!(q.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        for (i, &qi) in q.iter().enumerate() {
            axpy(&mut out, qi, self.row(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn max_abs_diff(&self, other: &HeadState) -> f64 {
        assert_eq!(self.dim, other.dim);
        crate::math::max_abs_diff_slices(&self.data, &other.data)
    }

    pub(crate) fn store(dim: usize, precision: Precision, raw: Vec<f64>) -> Result<Self> {
        if !all_finite(&raw) {
            return Err(Error::numeric("state update produced a non-finite entry"));
        }
        let data = raw.into_iter().map(|x| precision.round_state(x)).collect();
        Ok(HeadState {
            dim,
            precision,
            data,
        })
    }
}

/// One token's query, key and value vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQkv {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

impl TokenQkv {
    pub fn new(q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if q.len() != k.len() || q.len() != v.len() {
            return Err(Error::invalid_input("q, k, v must share one dimension"));
        }
        if !(all_finite(&q) && all_finite(&k) && all_finite(&v)) {
            return Err(Error::invalid_input("token vectors must be finite"));
        }
        Ok(TokenQkv { q, k, v })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// Queries, keys and values for a chunk of `n` tokens plus the causal mask.
#[derive(Debug, Clone)]
pub struct ChunkWorkspace {
    q: Mat,
    k: Mat,
    v: Mat,
    /// `n x n` causal mask, `mask[i][j] = true` iff `j <= i`.
    mask: Vec<bool>,
}

impl ChunkWorkspace {
    pub fn new(q: Mat, k: Mat, v: Mat) -> Result<Self> {
        if q.rows() != k.rows()
            || q.rows() != v.rows()
            || q.cols() != k.cols()
            || q.cols() != v.cols()
        {
            return Err(Error::invalid_input("Q, K, V must all be n x d"));
        }
        if !(q.is_finite() && k.is_finite() && v.is_finite()) {
            return Err(Error::invalid_input("chunk entries must be finite"));
        }
        let n = q.rows();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                mask[i * n + j] = true;
            }
        }
        Ok(ChunkWorkspace { q, k, v, mask })
    }

    pub fn from_tokens(tokens: &[TokenQkv]) -> Result<Self> {
        let q = Mat::from_rows(&tokens.iter().map(|t| t.q.clone()).collect::<Vec<_>>())?;
        let k = Mat::from_rows(&tokens.iter().map(|t| t.k.clone()).collect::<Vec<_>>())?;
        let v = Mat::from_rows(&tokens.iter().map(|t| t.v.clone()).collect::<Vec<_>>())?;
        ChunkWorkspace::new(q, k, v)
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn k(&self) -> &Mat {
        &self.k
    }

    pub fn v(&self) -> &Mat {
        &self.v
    }

    pub fn masked(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.len() + j]
    }
}

/// Parallel form: row `t` of the output is `sum_{i<=t} (q_t . k_i) v_i`.
///
/// Reads no state and writes none.
pub fn parallel_attend(chunk: &ChunkWorkspace) -> Result<Mat> {
    let n = chunk.len();
    let d = chunk.dim();
    let mut out = Mat::zeros(n, d);
    for t in 0..n {
        let qt = chunk.q().row(t);
        let row = out.row_mut(t);
        for i in 0..=t {
            debug_assert!(chunk.masked(t, i));
            let w = dot(qt, chunk.k().row(i));
            axpy(row, w, chunk.v().row(i));
        }
    }
    Ok(out)
}

/// Recurrent form: `S' = S + k^T v`, `o = q S'`.
pub fn recurrent_step(state: &HeadState, tok: &TokenQkv) -> Result<(HeadState, Vec<f64>)> {
    let d = state.dim();
    if tok.dim() != d {
        return Err(Error::invalid_input(format!(
            "token dim {} does not match state dim {d}",
            tok.dim()
        )));
    }
    let mut raw = state.as_slice().to_vec();
    for (i, &ki) in tok.k.iter().enumerate() {
        axpy(&mut raw[i * d..(i + 1) * d], ki, &tok.v);
    }
    // Output comes from the in-register update; rounding applies to the store.
    let mut out = vec![0.0; d];
    for (i, &qi) in tok.q.iter().enumerate() {
        axpy(&mut out, qi, &raw[i * d..(i + 1) * d]);
    }
    let next = HeadState::store(d, state.precision(), raw)?;
    Ok((next, out))
}

/// Chunkwise output for token `j` of a chunk:
/// `o_j = q_j S_start + sum_{i<=j} (q_j . k_i) v_i`.
///
/// `state` is the chunk-start state and is not mutated.
pub fn chunkwise_attend(state: &HeadState, chunk: &ChunkWorkspace, j: usize) -> Result<Vec<f64>> {
    if j >= chunk.len() {
        return Err(Error::invalid_input(format!(
            "token index {j} out of range for chunk of {}",
            chunk.len()
        )));
    }
    if chunk.dim() != state.dim() {
        return Err(Error::invalid_input("chunk and state dimensions differ"));
    }
    let qj = chunk.q().row(j);
    let mut out = state.query(qj);
    for i in 0..=j {
        let w = dot(qj, chunk.k().row(i));
        axpy(&mut out, w, chunk.v().row(i));
    }
    Ok(out)
}

/// Chunkwise state update: `S' = S + sum_i k_i^T v_i` over the chunk.
///
/// An empty chunk returns the state unchanged. The sum is accumulated in
/// full and rounded once at the store, matching a batched update kernel.
pub fn chunk_state_update(state: &HeadState, chunk: &ChunkWorkspace) -> Result<HeadState> {
    if chunk.is_empty() {
        return Ok(state.clone());
    }
    if chunk.dim() != state.dim() {
        return Err(Error::invalid_input("chunk and state dimensions differ"));
    }
    let d = state.dim();
    let mut raw = state.as_slice().to_vec();
    for t in 0..chunk.len() {
        let k = chunk.k().row(t);
        let v = chunk.v().row(t);
        for (i, &ki) in k.iter().enumerate() {
            axpy(&mut raw[i * d..(i + 1) * d], ki, v);
        }
    }
    HeadState::store(d, state.precision(), raw)
}
