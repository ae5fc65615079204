//! Randomized form-equivalence suites.
//!
//! Every suite drives the three computation forms over the same seeded
//! random sequences and reports the worst absolute output/state difference
//! observed, together with its tolerance. Token values are uniform in
//! `(-1, 1)`; GDN keys are normalized to unit length so the delta rule is
//! non-expansive and decay gates are drawn from the configured ranges.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gdn::{
    gdn_build_chunk, gdn_chunk_attend, gdn_chunk_state_update, gdn_parallel, gdn_recurrent_step,
    GdnToken,
};
use crate::linear_attn::{
    chunk_state_update, chunkwise_attend, parallel_attend, recurrent_step, ChunkWorkspace,
    HeadState, Precision, TokenQkv,
};
use crate::math::{dot, max_abs_diff_slices};

/// Parameters for the equivalence suites.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivConfig {
    pub vanilla_dims: Vec<usize>,
    pub vanilla_chunk_sizes: Vec<usize>,
    pub vanilla_max_len: usize,
    pub vanilla_tolerance: f64,
    pub gdn_dims: Vec<usize>,
    pub gdn_chunk_sizes: Vec<usize>,
    pub gdn_max_len: usize,
    pub gdn_tolerance: f64,
    pub a_residual_tolerance: f64,
    /// Random instances per (dimension, chunk size) pair.
    pub instances: usize,
    pub seed: u64,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    /// Perturb one output to confirm the harness catches breaches.
    pub inject_fault: bool,
}

impl Default for EquivConfig {
    fn default() -> Self {
        EquivConfig {
            vanilla_dims: vec![4, 8, 16, 32],
            vanilla_chunk_sizes: vec![1, 2, 5, 8, 16],
            vanilla_max_len: 96,
            vanilla_tolerance: 1e-11,
            gdn_dims: vec![4, 8, 16],
            gdn_chunk_sizes: vec![1, 2, 4, 8],
            gdn_max_len: 64,
            gdn_tolerance: 1e-8,
            a_residual_tolerance: 1e-10,
            instances: 100,
            seed: 0,
            alpha_range: (0.5, 1.0),
            beta_range: (0.0, 1.0),
            inject_fault: false,
        }
    }
}

/// Result of one suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub cases: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl SuiteOutcome {
    fn new(name: &str, cases: usize, max_abs_diff: f64, tolerance: f64) -> Self {
        SuiteOutcome {
            name: name.to_string(),
            cases,
            max_abs_diff,
            tolerance,
            pass: max_abs_diff <= tolerance,
        }
    }
}

/// Seeded vanilla token sequence with values uniform in `(-1, 1)`.
pub fn random_vanilla_tokens(d: usize, l: usize, seed: u64) -> Vec<TokenQkv> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..l)
        .map(|_| {
            let mut v = |_: ()| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            TokenQkv::new(v(()), v(()), v(())).expect("finite by construction")
        })
        .collect()
}

/// Seeded GDN token sequence: unit keys, gates drawn from the given ranges.
pub fn random_gdn_tokens(
    d: usize,
    l: usize,
    seed: u64,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
) -> Vec<GdnToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..l)
        .map(|_| {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut k: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dot(&k, &k).sqrt().max(1e-9);
            for x in k.iter_mut() {
                *x /= norm;
            }
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let alpha = if alpha_range.0 == alpha_range.1 {
                alpha_range.0
            } else {
                rng.random_range(alpha_range.0..alpha_range.1)
            };
            let beta = if beta_range.0 == beta_range.1 {
                beta_range.0
            } else {
                rng.random_range(beta_range.0..beta_range.1)
            };
            GdnToken::new(q, k, v, alpha, beta).expect("valid by construction")
        })
        .collect()
}

/// Vanilla suite: parallel, recurrent and chunkwise outputs plus final
/// recurrent-vs-chunkwise states, across the full grid.
pub fn vanilla_suite(cfg: &EquivConfig) -> SuiteOutcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut seed = cfg.seed;
    for &d in &cfg.vanilla_dims {
        for &m in &cfg.vanilla_chunk_sizes {
            for _ in 0..cfg.instances {
                seed = seed.wrapping_add(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let l = rng.random_range(1..=cfg.vanilla_max_len);
                let tokens = random_vanilla_tokens(d, l, seed);

                // Recurrent reference.
                let mut rec_state = HeadState::zeros(d, Precision::Fp64Reference);
                let mut rec_outs = Vec::with_capacity(l);
                for t in &tokens {
                    let (next, o) = recurrent_step(&rec_state, t).expect("valid tokens");
                    rec_state = next;
                    rec_outs.push(o);
                }

                // Parallel over the whole sequence.
                let ws = ChunkWorkspace::from_tokens(&tokens).expect("valid tokens");
                let par = parallel_attend(&ws).expect("valid chunk");
                for (t, o) in rec_outs.iter().enumerate() {
                    worst = worst.max(max_abs_diff_slices(par.row(t), o));
                }

                // Chunkwise with chunk size m.
                let mut state = HeadState::zeros(d, Precision::Fp64Reference);
                let mut idx = 0;
                let mut first = cases == 0 && cfg.inject_fault;
                for group in tokens.chunks(m) {
                    let cws = ChunkWorkspace::from_tokens(group).expect("valid tokens");
                    for j in 0..group.len() {
                        let mut o = chunkwise_attend(&state, &cws, j).expect("valid index");
                        if first {
                            o[0] += 1e-3;
                            first = false;
                        }
                        worst = worst.max(max_abs_diff_slices(&o, &rec_outs[idx]));
                        idx += 1;
                    }
                    state = chunk_state_update(&state, &cws).expect("valid chunk");
                }
                worst = worst.max(state.max_abs_diff(&rec_state));
                cases += 1;
            }
        }
    }
    SuiteOutcome::new("vanilla_form_equivalence", cases, worst, cfg.vanilla_tolerance)
}

/// GDN suite: recurrent vs chunkwise vs parallel, with the triangular-solve
/// residual tracked separately.
pub fn gdn_suite(cfg: &EquivConfig) -> (SuiteOutcome, SuiteOutcome) {
    let mut worst: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    let mut cases = 0;
    let mut seed = cfg.seed;
    for &d in &cfg.gdn_dims {
        for &m in &cfg.gdn_chunk_sizes {
            for _ in 0..cfg.instances {
                seed = seed.wrapping_add(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6dee);
                let l = rng.random_range(1..=cfg.gdn_max_len);
                let tokens = random_gdn_tokens(d, l, seed, cfg.alpha_range, cfg.beta_range);

                let mut rec_state = HeadState::zeros(d, Precision::Fp64Reference);
                let mut rec_outs = Vec::with_capacity(l);
                for t in &tokens {
                    let (next, o) = gdn_recurrent_step(&rec_state, t).expect("valid tokens");
                    rec_state = next;
                    rec_outs.push(o);
                }

                // Parallel (whole sequence as one chunk, zero state).
                let par = gdn_parallel(&tokens).expect("valid tokens");
                for (t, o) in rec_outs.iter().enumerate() {
                    worst = worst.max(max_abs_diff_slices(par.row(t), o));
                }

                // Chunkwise with chunk size m.
                let mut state = HeadState::zeros(d, Precision::Fp64Reference);
                let mut idx = 0;
                for group in tokens.chunks(m) {
                    let chunk = gdn_build_chunk(group, Some(&state), m).expect("valid chunk");
                    worst_residual = worst_residual.max(chunk.a_residual());
                    let out = gdn_chunk_attend(&chunk, &state).expect("valid chunk");
                    for j in 0..group.len() {
                        worst = worst.max(max_abs_diff_slices(out.row(j), &rec_outs[idx]));
                        idx += 1;
                    }
                    state =
                        gdn_chunk_state_update(&state, &chunk.buffered()).expect("valid update");
                }
                worst = worst.max(state.max_abs_diff(&rec_state));
                cases += 1;
            }
        }
    }
    (
        SuiteOutcome::new("gdn_form_equivalence", cases, worst, cfg.gdn_tolerance),
        SuiteOutcome::new(
            "gdn_a_matrix_residual",
            cases,
            worst_residual,
            cfg.a_residual_tolerance,
        ),
    )
}

/// Run every suite; any tolerance breach shows up as `pass: false`.
pub fn run_equiv_suite(cfg: &EquivConfig) -> Vec<SuiteOutcome> {
    let vanilla = vanilla_suite(cfg);
    let (gdn, residual) = gdn_suite(cfg);
    vec![vanilla, gdn, residual]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EquivConfig {
        EquivConfig {
            vanilla_dims: vec![4, 8],
            vanilla_chunk_sizes: vec![1, 3],
            vanilla_max_len: 24,
            gdn_dims: vec![4],
            gdn_chunk_sizes: vec![2, 4],
            gdn_max_len: 24,
            instances: 5,
            ..EquivConfig::default()
        }
    }

    #[test]
    fn small_suites_pass() {
        let outcomes = run_equiv_suite(&small_cfg());
        for o in &outcomes {
            assert!(o.pass, "{} diff {} > {}", o.name, o.max_abs_diff, o.tolerance);
            assert!(o.cases > 0);
        }
    }

    #[test]
    fn injected_fault_breaches_tolerance() {
        let mut cfg = small_cfg();
        cfg.inject_fault = true;
        let outcomes = run_equiv_suite(&cfg);
        assert!(outcomes.iter().any(|o| !o.pass));
    }

    #[test]
    fn degenerate_gates_reduce_to_delta_rule() {
        let mut cfg = small_cfg();
        cfg.alpha_range = (1.0, 1.0);
        cfg.beta_range = (1.0, 1.0);
        let (gdn, residual) = gdn_suite(&cfg);
        assert!(gdn.pass, "diff {}", gdn.max_abs_diff);
        assert!(residual.pass);
    }
}
