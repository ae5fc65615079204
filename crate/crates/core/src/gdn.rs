//! Reference kernels for gated delta networks (GDN).
//!
//! GDN extends linear attention with a per-token decay gate `alpha` and a
//! delta-rule write with learning rate `beta`:
//!
//! ```text
//! S_t = alpha_t (I - beta_t k_t^T k_t) S_{t-1} + beta_t k_t^T v_t
//! o_t = q_t S_t
//! ```
//!
//! Introducing the delta value `u_t = beta_t (v_t - k_t (alpha_t S_{t-1}))`
//! turns the update into `S_t = alpha_t S_{t-1} + k_t^T u_t`, which unrolls
//! over a chunk into decay-weighted sums. Within a chunk of `n` tokens the
//! delta values satisfy a unit-lower-triangular system
//!
//! ```text
//! [I + strictLower(Diag(beta) (Gamma . K K^T))] U
//!     = Diag(beta) V - Diag(gamma) Diag(beta) K S_start
//! ```
//!
//! where `gamma_i` is the chunk-local cumulative decay and
//! `Gamma_ij = gamma_i / gamma_j` for `i >= j`. The system is solved by
//! forward substitution; its inverse `A` is kept on the chunk for
//! residual checks. Decay ratios are computed as explicit products of
//! `alpha` over the index gap, never as quotients of long cumulative
//! products, so they cannot underflow.
//!
//! Only the buffered quantities `(alpha, k, u)` are needed to advance the
//! state later, which is what the decode path stores per token.

use crate::error::{Error, Result};
use crate::linear_attn::HeadState;
use crate::math::{all_finite, axpy, dot, Mat};

/// One GDN token: q/k/v vectors plus the decay factor and learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnToken {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Decay factor, in `(0, 1]`.
    pub alpha: f64,
    /// Learning rate, in `[0, 1]`.
    pub beta: f64,
}

impl GdnToken {
    pub fn new(q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        if q.len() != k.len() || q.len() != v.len() {
            return Err(Error::invalid_input("q, k, v must share one dimension"));
        }
        if !(all_finite(&q) && all_finite(&k) && all_finite(&v)) {
            return Err(Error::invalid_input("token vectors must be finite"));
        }
        check_gates(alpha, beta)?;
        Ok(GdnToken { q, k, v, alpha, beta })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

fn check_gates(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid_input(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if !(beta.is_finite() && (0.0..=1.0).contains(&beta)) {
        return Err(Error::invalid_input(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    Ok(())
}

/// The quantities buffered per decoded token: decay factor, key, delta value.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnBufferedToken {
    pub alpha: f64,
    pub k: Vec<f64>,
    pub u: Vec<f64>,
}

impl GdnBufferedToken {
    pub fn new(alpha: f64, k: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if k.len() != u.len() {
            return Err(Error::invalid_input("k and u must share one dimension"));
        }
        if !(all_finite(&k) && all_finite(&u)) {
            return Err(Error::invalid_input("buffered vectors must be finite"));
        }
        if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid_input(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(GdnBufferedToken { alpha, k, u })
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }
}

/// A chunk of GDN tokens with all derived chunk quantities.
#[derive(Debug, Clone)]
pub struct GdnChunk {
    tokens: Vec<GdnToken>,
    /// Chunk-local cumulative decay, `gamma[i] = prod_{j<=i} alpha_j`.
    gamma: Vec<f64>,
    /// `n x n` decay mask, `Gamma_ij = prod_{l=j+1..=i} alpha_l` for `i >= j`,
    /// zero above the diagonal, ones on it.
    decay_mask: Mat,
    /// Inverse of the unit-lower-triangular system matrix.
    a: Mat,
    k_tilde: Mat,
    v_tilde: Mat,
    /// Delta values, one row per token.
    u: Mat,
}

impl GdnChunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].dim()
    }

    pub fn tokens(&self) -> &[GdnToken] {
        &self.tokens
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn decay_mask(&self) -> &Mat {
        &self.decay_mask
    }

    pub fn a_matrix(&self) -> &Mat {
        &self.a
    }

    pub fn k_tilde(&self) -> &Mat {
        &self.k_tilde
    }

    pub fn v_tilde(&self) -> &Mat {
        &self.v_tilde
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }

    /// Buffered records `(alpha, k, u)` for every token of the chunk.
    pub fn buffered(&self) -> Vec<GdnBufferedToken> {
        self.tokens
            .iter()
            .zip(0..self.len())
            .map(|(t, i)| GdnBufferedToken {
                alpha: t.alpha,
                k: t.k.clone(),
                u: self.u.row(i).to_vec(),
            })
            .collect()
    }

    /// Max-abs residual of `(I + strictLower(Diag(beta)(Gamma . K K^T))) A - I`.
    pub fn a_residual(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for c in 0..n {
                // Row i of T times column c of A.
                let mut acc = self.a.get(i, c);
                for j in 0..i {
                    let t_ij = self.tokens[i].beta
                        * self.decay_mask.get(i, j)
                        * dot(&self.tokens[i].k, &self.tokens[j].k);
                    acc += t_ij * self.a.get(j, c);
                }
                let want = if i == c { 1.0 } else { 0.0 };
                worst = worst.max((acc - want).abs());
            }
        }
        worst
    }
}

/// Recurrent GDN step: decay, delta-rule write, query.
pub fn gdn_recurrent_step(state: &HeadState, tok: &GdnToken) -> Result<(HeadState, Vec<f64>)> {
    let d = state.dim();
    if tok.dim() != d {
        return Err(Error::invalid_input(format!(
            "token dim {} does not match state dim {d}",
            tok.dim()
        )));
    }
    check_gates(tok.alpha, tok.beta)?;
    // S~ = alpha S
    let mut raw: Vec<f64> = state.as_slice().iter().map(|&x| tok.alpha * x).collect();
    // u = beta (v - k S~)
    let mut retrieved = vec![0.0; d];
    for (i, &ki) in tok.k.iter().enumerate() {
        axpy(&mut retrieved, ki, &raw[i * d..(i + 1) * d]);
    }
    let u: Vec<f64> = tok
        .v
        .iter()
        .zip(&retrieved)
        .map(|(&v, &r)| tok.beta * (v - r))
        .collect();
    // S' = S~ + k^T u
    for (i, &ki) in tok.k.iter().enumerate() {
        axpy(&mut raw[i * d..(i + 1) * d], ki, &u);
    }
    let mut out = vec![0.0; d];
    for (i, &qi) in tok.q.iter().enumerate() {
        axpy(&mut out, qi, &raw[i * d..(i + 1) * d]);
    }
    let next = HeadState::store(d, state.precision(), raw)?;
    Ok((next, out))
}

/// Build all chunk quantities for `tokens` against the chunk-start state.
///
/// `state` absent is treated as the zero state. `max_chunk` bounds the
/// admissible chunk length; pass `tokens.len()` for whole-sequence use.
pub fn gdn_build_chunk(
    tokens: &[GdnToken],
    state: Option<&HeadState>,
    max_chunk: usize,
) -> Result<GdnChunk> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::invalid_input("chunk must hold at least one token"));
    }
    if n > max_chunk {
        return Err(Error::invalid_input(format!(
            "chunk of {n} tokens exceeds limit {max_chunk}"
        )));
    }
    let d = tokens[0].dim();
    for t in tokens {
        if t.dim() != d {
            return Err(Error::invalid_input("tokens must share one dimension"));
        }
        check_gates(t.alpha, t.beta)?;
    }
    if let Some(s) = state {
        if s.dim() != d {
            return Err(Error::invalid_input("state dimension does not match chunk"));
        }
    }

    // gamma and the decay mask, built row-incrementally from alpha products.
    let mut gamma = Vec::with_capacity(n);
    let mut acc = 1.0;
    for t in tokens {
        acc *= t.alpha;
        gamma.push(acc);
    }
    let mut decay_mask = Mat::zeros(n, n);
    for i in 0..n {
        decay_mask.set(i, i, 1.0);
        for j in (0..i).rev() {
            let below = decay_mask.get(i, j + 1);
            decay_mask.set(i, j, below * tokens[j + 1].alpha);
        }
    }

    // Forward substitution on T A = I with
    // T = I + strictLower(Diag(beta) (Gamma . K K^T)).
    let mut t_strict = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            t_strict.set(
                i,
                j,
                tokens[i].beta * decay_mask.get(i, j) * dot(&tokens[i].k, &tokens[j].k),
            );
        }
    }
    let mut a = Mat::zeros(n, n);
    for c in 0..n {
        a.set(c, c, 1.0);
        for i in (c + 1)..n {
            let mut acc = 0.0;
            for j in c..i {
                acc += t_strict.get(i, j) * a.get(j, c);
            }
            a.set(i, c, -acc);
        }
    }

    // V~ = A Diag(beta) V  and  K~ = A Diag(gamma) Diag(beta) K.
    let mut v_tilde = Mat::zeros(n, d);
    let mut k_tilde = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..=i {
            let a_ij = a.get(i, j);
            if a_ij == 0.0 {
                continue;
            }
            axpy(v_tilde.row_mut(i), a_ij * tokens[j].beta, &tokens[j].v);
            axpy(
                k_tilde.row_mut(i),
                a_ij * gamma[j] * tokens[j].beta,
                &tokens[j].k,
            );
        }
    }

    // U = V~ - K~ S_start.
    let mut u = v_tilde.clone();
    if let Some(s) = state {
        for i in 0..n {
            let kt = k_tilde.row(i);
            let correction = {
                let mut c = vec![0.0; d];
                for (r, &w) in kt.iter().enumerate() {
                    axpy(&mut c, w, s.row(r));
                }
                c
            };
            let row = u.row_mut(i);
            for (x, c) in row.iter_mut().zip(&correction) {
                *x -= c;
            }
        }
    }

    if !(u.is_finite() && a.is_finite()) {
        return Err(Error::numeric("chunk build produced a non-finite entry"));
    }

    Ok(GdnChunk {
        tokens: tokens.to_vec(),
        gamma,
        decay_mask,
        a,
        k_tilde,
        v_tilde,
        u,
    })
}

/// Chunkwise outputs `O = Diag(gamma) Q S + (Q K^T . Gamma) U`.
///
/// `state` must be the chunk-start state the chunk was built against; it is
/// not mutated.
pub fn gdn_chunk_attend(chunk: &GdnChunk, state: &HeadState) -> Result<Mat> {
    let n = chunk.len();
    let d = chunk.dim();
    if state.dim() != d {
        return Err(Error::invalid_input("chunk and state dimensions differ"));
    }
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let tok = &chunk.tokens[i];
        let mut row = state.query(&tok.q);
        for x in row.iter_mut() {
            *x *= chunk.gamma[i];
        }
        for j in 0..=i {
            let w = chunk.decay_mask.get(i, j) * dot(&tok.q, &chunk.tokens[j].k);
            axpy(&mut row, w, chunk.u.row(j));
        }
        out.row_mut(i).copy_from_slice(&row);
    }
    if !out.is_finite() {
        return Err(Error::numeric("chunk attend produced a non-finite entry"));
    }
    Ok(out)
}

/// Advance the state over buffered tokens:
/// `S' = gamma_n S + sum_i (gamma_n / gamma_i) k_i^T u_i`.
///
/// Decay ratios are alpha products over the index gap. An empty list
/// returns the state unchanged.
pub fn gdn_chunk_state_update(
    state: &HeadState,
    buffered: &[GdnBufferedToken],
) -> Result<HeadState> {
    if buffered.is_empty() {
        return Ok(state.clone());
    }
    let d = state.dim();
    let n = buffered.len();
    for b in buffered {
        if b.dim() != d {
            return Err(Error::invalid_input("buffered token dimension mismatch"));
        }
    }
    // ratio[i] = prod_{l>i} alpha_l, so ratio[n-1] = 1.
    let mut ratio = vec![1.0; n];
    for i in (0..n - 1).rev() {
        ratio[i] = ratio[i + 1] * buffered[i + 1].alpha;
    }
    let total_decay = ratio[0] * buffered[0].alpha;
    let mut raw: Vec<f64> = state.as_slice().iter().map(|&x| total_decay * x).collect();
    for (i, b) in buffered.iter().enumerate() {
        for (r, &kr) in b.k.iter().enumerate() {
            axpy(&mut raw[r * d..(r + 1) * d], ratio[i] * kr, &b.u);
        }
    }
    HeadState::store(d, state.precision(), raw)
}

/// Whole-sequence outputs from a zero initial state, via the chunk
/// machinery applied to the sequence as a single chunk.
pub fn gdn_parallel(tokens: &[GdnToken]) -> Result<Mat> {
    if tokens.is_empty() {
        return Err(Error::invalid_input("sequence must hold at least one token"));
    }
    let d = tokens[0].dim();
    let chunk = gdn_build_chunk(tokens, None, tokens.len())?;
    let zero = HeadState::zeros(d, crate::linear_attn::Precision::Fp64Reference);
    gdn_chunk_attend(&chunk, &zero)
}

/// One buffered decode step: compute the new token's delta value and output
/// against the chunk-start state (`None` means no state, zero) and the
/// records buffered since the state was last advanced.
///
/// Equivalent to row `len(buffered)` of a freshly built chunk; exercised as
/// such in tests.
pub fn gdn_decode_step(
    state: Option<&HeadState>,
    buffered: &[GdnBufferedToken],
    tok: &GdnToken,
) -> Result<(GdnBufferedToken, Vec<f64>)> {
    let d = tok.dim();
    check_gates(tok.alpha, tok.beta)?;
    if let Some(s) = state {
        if s.dim() != d {
            return Err(Error::invalid_input("state dimension does not match token"));
        }
    }
    for b in buffered {
        if b.dim() != d {
            return Err(Error::invalid_input("buffered token dimension mismatch"));
        }
    }
    let j = buffered.len();
    // ratio[i] = prod_{l=i+1..=j} alpha_l over the chunk-local indices,
    // where index j is the incoming token.
    let mut ratio = vec![1.0; j + 1];
    for i in (0..j).rev() {
        let alpha_next = if i + 1 < j {
            buffered[i + 1].alpha
        } else {
            tok.alpha
        };
        ratio[i] = ratio[i + 1] * alpha_next;
    }
    let gamma_j = if j == 0 {
        tok.alpha
    } else {
        ratio[0] * buffered[0].alpha
    };

    // u_j = beta (v - gamma_j k S - sum_{i<j} ratio_i (k . k_i) u_i)
    let mut corr = vec![0.0; d];
    if let Some(s) = state {
        let mut ks = vec![0.0; d];
        for (r, &kr) in tok.k.iter().enumerate() {
            axpy(&mut ks, kr, s.row(r));
        }
        axpy(&mut corr, gamma_j, &ks);
    }
    for (i, b) in buffered.iter().enumerate() {
        let w = ratio[i] * dot(&tok.k, &b.k);
        axpy(&mut corr, w, &b.u);
    }
    let u: Vec<f64> = tok
        .v
        .iter()
        .zip(&corr)
        .map(|(&v, &c)| tok.beta * (v - c))
        .collect();

    // o_j = gamma_j q S + sum_{i<j} ratio_i (q . k_i) u_i + (q . k_j) u_j
    let mut out = vec![0.0; d];
    if let Some(s) = state {
        let qs = s.query(&tok.q);
        axpy(&mut out, gamma_j, &qs);
    }
    for (i, b) in buffered.iter().enumerate() {
        let w = ratio[i] * dot(&tok.q, &b.k);
        axpy(&mut out, w, &b.u);
    }
    axpy(&mut out, dot(&tok.q, &tok.k), &u);

    if !(all_finite(&u) && all_finite(&out)) {
        return Err(Error::numeric("decode step produced a non-finite entry"));
    }
    let record = GdnBufferedToken {
        alpha: tok.alpha,
        k: tok.k.clone(),
        u,
    };
    Ok((record, out))
}
