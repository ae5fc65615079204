//! Analytic byte accounting and speedup model for linear-attention decoding.
//!
//! Storage widths: the state is f32 (`4d^2` bytes), per-token vectors
//! q/k/v/u/o are f16 (`2d` bytes each) and gate scalars are f16 (2 bytes).
//! The recurrent baseline fuses state update and output into one kernel, so
//! the state is read and written once per step; an unfused variant is
//! available behind a flag for sensitivity analysis.
//!
//! Two independent routes are kept side by side:
//!
//! * [`profile`] returns the closed-form per-token averages for each
//!   computation form, transcribed directly;
//! * the `*_cost` event functions enumerate the tensor traffic of each
//!   kernel launch (decode step, buffer flush, verification pass, ...).
//!
//! Averaging the event route over a chunk cycle reproduces the closed forms
//! exactly, which the tests assert in rational arithmetic. The speedup
//! formulas are exact ratios of those totals. Everything stays rational
//! until the reporting boundary.

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Variant;

/// Computation form of a decoding configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Parallel,
    Recurrent,
    Chunkwise,
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Form::Parallel => write!(f, "parallel"),
            Form::Recurrent => write!(f, "recurrent"),
            Form::Chunkwise => write!(f, "chunkwise"),
        }
    }
}

/// Verification strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    /// One temporary state per draft token, sequential recurrent steps.
    RecurrentBaseline,
    /// Buffer draft KVs, verify in one chunkwise pass, update once.
    KvBuffered,
}

impl std::fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VerifyMode::RecurrentBaseline => write!(f, "recurrent_baseline"),
            VerifyMode::KvBuffered => write!(f, "kv_buffered"),
        }
    }
}

/// One decoding configuration to be profiled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub form: Form,
    pub variant: Variant,
    /// Head dimension `d`.
    pub d: u64,
    /// Context length `L`; meaningful for the parallel form.
    #[serde(default)]
    pub context_len: u64,
    /// Chunk size `m`; required for the chunkwise form.
    #[serde(default)]
    pub chunk: Option<u64>,
    /// Whether the recurrent form fuses update and output into one kernel.
    #[serde(default = "default_true")]
    pub fused_recurrent: bool,
}

fn default_true() -> bool {
    true
}

/// Per-token averages for one decoding configuration, exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostProfile {
    pub storage_bytes: Rational64,
    pub read_bytes_per_token: Rational64,
    pub write_bytes_per_token: Rational64,
    pub flop_count: Rational64,
    /// flops per byte of read+write traffic.
    pub arithmetic_intensity: Rational64,
}

impl CostProfile {
    pub fn total_access_per_token(&self) -> Rational64 {
        self.read_bytes_per_token + self.write_bytes_per_token
    }
}

fn rat(x: u64) -> Rational64 {
    Rational64::from_integer(x as i64)
}

fn intensity(flops: Rational64, read: Rational64, write: Rational64) -> Rational64 {
    let total = read + write;
    if total.is_zero() {
        Rational64::zero()
    } else {
        flops / total
    }
}

// ---------------------------------------------------------------------------
// Elementary sizes
// ---------------------------------------------------------------------------

/// Bytes of one f32 state: `4 d^2`.
pub fn state_bytes(d: u64) -> u64 {
    4 * d * d
}

/// Bytes of one buffered token record: f16 `k`/`v` for vanilla (`4d`),
/// f16 `k`/`u` plus the decay scalar for GDN (`4d + 2`).
pub fn record_bytes(variant: Variant, d: u64) -> u64 {
    match variant {
        Variant::Vanilla => 4 * d,
        Variant::Gdn => 4 * d + 2,
    }
}

/// Bytes read for a freshly projected token: q, k, v (`6d`), plus the two
/// gate scalars for GDN.
pub fn fresh_token_bytes(variant: Variant, d: u64) -> u64 {
    match variant {
        Variant::Vanilla => 6 * d,
        Variant::Gdn => 6 * d + 4,
    }
}

fn out_bytes(d: u64) -> u64 {
    2 * d
}

// ---------------------------------------------------------------------------
// Per-event kernel costs
// ---------------------------------------------------------------------------

/// Modeled traffic and arithmetic of one kernel launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventCost {
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub flops: u64,
}

impl EventCost {
    pub fn total_bytes(&self) -> u64 {
        self.read_bytes + self.write_bytes
    }

    pub fn add(&mut self, other: EventCost) {
        self.read_bytes += other.read_bytes;
        self.write_bytes += other.write_bytes;
        self.flops += other.flops;
    }
}

/// Weighted dot product plus accumulate, `acc += w (x . y) z`: the flop
/// unit used by the intra-chunk sums.
fn pair_flops(d: u64) -> u64 {
    4 * d + 1
}

/// Chunkwise decode step producing the `j`-th token of the current chunk
/// (`j >= 1`): read state + fresh q/k/v (+gates) + the `j-1` records already
/// buffered; write the new record and the output.
pub fn decode_step_cost(variant: Variant, d: u64, j: u64) -> EventCost {
    assert!(j >= 1);
    let flops = match variant {
        // o_j = q_j S + sum_{i<=j} (q_j.k_i) v_i
        Variant::Vanilla => 2 * d * d + 4 * j * d,
        // Delta value against the stale state plus the decayed intra sums.
        Variant::Gdn => 4 * d * d + 6 * d + (2 * j - 1) * pair_flops(d) + (j - 1),
    };
    EventCost {
        read_bytes: state_bytes(d)
            + fresh_token_bytes(variant, d)
            + (j - 1) * record_bytes(variant, d),
        write_bytes: record_bytes(variant, d) + out_bytes(d),
        flops,
    }
}

/// Batched state update over `n` buffered records (the buffer flush).
pub fn flush_cost(variant: Variant, d: u64, n: u64) -> EventCost {
    if n == 0 {
        return EventCost::default();
    }
    let flops = match variant {
        Variant::Vanilla => 2 * n * d * d,
        Variant::Gdn => d * d + n * (2 * d * d + d) + (n - 1),
    };
    EventCost {
        read_bytes: state_bytes(d) + n * record_bytes(variant, d),
        write_bytes: state_bytes(d),
        flops,
    }
}

/// KV-only decode step at context length `L` (after appending the new
/// token): read the `L-1` previous records + fresh q/k/v (+gates); write the
/// new record and the output. No state exists.
pub fn kv_only_step_cost(variant: Variant, d: u64, l: u64) -> EventCost {
    assert!(l >= 1);
    let flops = match variant {
        Variant::Vanilla => 4 * l * d,
        Variant::Gdn => (2 * l - 1) * pair_flops(d) + 2 * d + (l - 1),
    };
    EventCost {
        read_bytes: (l - 1) * record_bytes(variant, d) + fresh_token_bytes(variant, d),
        write_bytes: record_bytes(variant, d) + out_bytes(d),
        flops,
    }
}

/// One recurrent decode step (state update and output fused by default).
pub fn recurrent_step_cost(variant: Variant, d: u64, fused: bool) -> EventCost {
    let state_reads = if fused { 1 } else { 2 };
    let flops = match variant {
        Variant::Vanilla => 4 * d * d,
        Variant::Gdn => 7 * d * d + 2 * d,
    };
    EventCost {
        read_bytes: state_reads * state_bytes(d) + fresh_token_bytes(variant, d),
        write_bytes: state_bytes(d) + out_bytes(d),
        flops,
    }
}

/// Buffered verification, output pass: one chunkwise pass over `n` draft
/// tokens against the current state. Reads state + fresh draft q/k/v
/// (+gates); writes the buffered records and the outputs.
pub fn verify_outputs_cost(variant: Variant, d: u64, n: u64) -> EventCost {
    if n == 0 {
        return EventCost::default();
    }
    let flops = match variant {
        Variant::Vanilla => 2 * n * d * d + 2 * n * (n + 1) * d,
        // Adds the decay mask and the triangular solve for the delta values.
        Variant::Gdn => 2 * n * d * d + 2 * n * (n + 1) * d + n * n * (2 * d + 6) + n * n * n,
    };
    EventCost {
        read_bytes: state_bytes(d) + n * fresh_token_bytes(variant, d),
        write_bytes: n * record_bytes(variant, d) + n * out_bytes(d),
        flops,
    }
}

/// Buffered verification, state pass: fold the `accepted` prefix of the
/// buffered draft records into the state. Skipped entirely when nothing was
/// accepted.
pub fn verify_state_update_cost(variant: Variant, d: u64, accepted: u64) -> EventCost {
    flush_cost(variant, d, accepted)
}

/// Recurrent-baseline verification of `n` draft tokens, fused: the initial
/// state is read once (drafts are sequential), one temporary state is
/// written per draft token.
pub fn recurrent_verify_cost(variant: Variant, d: u64, n: u64) -> EventCost {
    if n == 0 {
        return EventCost::default();
    }
    let per_step = match variant {
        Variant::Vanilla => 4 * d * d,
        Variant::Gdn => 7 * d * d + 2 * d,
    };
    EventCost {
        read_bytes: state_bytes(d) + n * fresh_token_bytes(variant, d),
        write_bytes: n * state_bytes(d) + n * out_bytes(d),
        flops: n * per_step,
    }
}

/// KV-only prefill of `l` prompt tokens: one parallel pass that reads the
/// fresh tokens and writes their records and outputs. No state exists.
pub fn kv_only_prefill_cost(variant: Variant, d: u64, l: u64) -> EventCost {
    if l == 0 {
        return EventCost::default();
    }
    let mut flops = 0;
    for t in 1..=l {
        flops += kv_only_step_cost(variant, d, t).flops;
    }
    EventCost {
        read_bytes: l * fresh_token_bytes(variant, d),
        write_bytes: l * (record_bytes(variant, d) + out_bytes(d)),
        flops,
    }
}

/// Prefill of one chunk of `n` prompt tokens on the chunkwise path: read
/// state + fresh tokens, write outputs and the updated state.
pub fn prefill_chunk_cost(variant: Variant, d: u64, n: u64) -> EventCost {
    if n == 0 {
        return EventCost::default();
    }
    let attend = verify_outputs_cost(variant, d, n).flops;
    let update = flush_cost(variant, d, n).flops;
    EventCost {
        read_bytes: state_bytes(d) + n * fresh_token_bytes(variant, d),
        write_bytes: state_bytes(d) + n * out_bytes(d),
        flops: attend + update,
    }
}

// ---------------------------------------------------------------------------
// Closed-form per-token profiles
// ---------------------------------------------------------------------------

/// Closed-form storage and average per-token memory access for one
/// decoding configuration, plus the modeled flop count and arithmetic
/// intensity.
///
/// Vanilla forms (bytes):
///
/// | form      | storage        | read/token                | write/token    |
/// |-----------|----------------|---------------------------|----------------|
/// | parallel  | `4Ld`          | `4Ld + 2d`                | `6d`           |
/// | recurrent | `4d^2`         | `4d^2 + 6d`               | `4d^2 + 2d`    |
/// | chunkwise | `4d^2 + 4md`   | `4(1+1/m)d^2 + 2(m+4)d`   | `4d^2/m + 6d`  |
///
/// GDN adds the buffered decay scalars and the gate reads:
///
/// | form      | storage             | read/token                        | write/token        |
/// |-----------|---------------------|-----------------------------------|--------------------|
/// | parallel  | `4Ld + 2L`          | `4Ld + 2d + 2L + 2`               | `6d + 2`           |
/// | recurrent | `4d^2`              | `4d^2 + 6d + 4`                   | `4d^2 + 2d`        |
/// | chunkwise | `4d^2 + 4md + 2m`   | `4(1+1/m)d^2 + 2(m+4)d + m + 5`   | `4d^2/m + 6d + 2`  |
pub fn profile(q: &CostQuery) -> Result<CostProfile> {
    if q.d == 0 {
        return Err(Error::invalid_input("head dimension must be >= 1"));
    }
    let d = rat(q.d);
    let l = rat(q.context_len);
    match (q.form, q.variant) {
        (Form::Parallel, Variant::Vanilla) => {
            let storage = rat(4) * l * d;
            let read = rat(4) * l * d + rat(2) * d;
            let write = rat(6) * d;
            let flops = rat(4) * l * d;
            Ok(CostProfile {
                storage_bytes: storage,
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
        (Form::Parallel, Variant::Gdn) => {
            let storage = rat(4) * l * d + rat(2) * l;
            let read = rat(4) * l * d + rat(2) * d + rat(2) * l + rat(2);
            let write = rat(6) * d + rat(2);
            let flops = if q.context_len == 0 {
                Rational64::zero()
            } else {
                rat(kv_only_step_cost(Variant::Gdn, q.d, q.context_len).flops)
            };
            Ok(CostProfile {
                storage_bytes: storage,
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
        (Form::Recurrent, variant) => {
            let gate = match variant {
                Variant::Vanilla => Rational64::zero(),
                Variant::Gdn => rat(4),
            };
            let state_reads = if q.fused_recurrent { rat(4) } else { rat(8) };
            let storage = rat(4) * d * d;
            let read = state_reads * d * d + rat(6) * d + gate;
            let write = rat(4) * d * d + rat(2) * d;
            let flops = rat(recurrent_step_cost(variant, q.d, true).flops);
            Ok(CostProfile {
                storage_bytes: storage,
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
        (Form::Chunkwise, variant) => {
            let m_int = q
                .chunk
                .ok_or_else(|| Error::invalid_input("chunkwise queries need a chunk size"))?;
            if m_int == 0 {
                return Err(Error::invalid_input("chunk size must be >= 1"));
            }
            let m = rat(m_int);
            let (storage, read, write) = match variant {
                Variant::Vanilla => (
                    rat(4) * d * d + rat(4) * m * d,
                    rat(4) * (rat(1) + rat(1) / m) * d * d + rat(2) * (m + rat(4)) * d,
                    rat(4) * d * d / m + rat(6) * d,
                ),
                Variant::Gdn => (
                    rat(4) * d * d + rat(4) * m * d + rat(2) * m,
                    rat(4) * (rat(1) + rat(1) / m) * d * d
                        + rat(2) * (m + rat(4)) * d
                        + m
                        + rat(5),
                    rat(4) * d * d / m + rat(6) * d + rat(2),
                ),
            };
            // Flops averaged over one full cycle: m decode steps + the flush.
            let mut cycle = 0u64;
            for j in 1..=m_int {
                cycle += decode_step_cost(variant, q.d, j).flops;
            }
            cycle += flush_cost(variant, q.d, m_int).flops;
            let flops = rat(cycle) / m;
            Ok(CostProfile {
                storage_bytes: storage,
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
    }
}

/// Per-token averages recomputed from the per-event kernel costs: one full
/// chunk cycle for the chunkwise form, the step at context `L` for the
/// parallel form. This is the enumeration route the closed forms are
/// checked against.
pub fn profile_from_events(q: &CostQuery) -> Result<CostProfile> {
    if q.d == 0 {
        return Err(Error::invalid_input("head dimension must be >= 1"));
    }
    match q.form {
        Form::Recurrent => {
            let ev = recurrent_step_cost(q.variant, q.d, q.fused_recurrent);
            let read = rat(ev.read_bytes);
            let write = rat(ev.write_bytes);
            let flops = rat(ev.flops);
            Ok(CostProfile {
                storage_bytes: rat(state_bytes(q.d)),
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
        Form::Parallel => {
            if q.context_len == 0 {
                return Err(Error::invalid_input(
                    "event route needs context_len >= 1 for the parallel form",
                ));
            }
            let ev = kv_only_step_cost(q.variant, q.d, q.context_len);
            let read = rat(ev.read_bytes);
            let write = rat(ev.write_bytes);
            let flops = rat(ev.flops);
            Ok(CostProfile {
                storage_bytes: rat(q.context_len * record_bytes(q.variant, q.d)),
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
        Form::Chunkwise => {
            let m = q
                .chunk
                .filter(|&m| m >= 1)
                .ok_or_else(|| Error::invalid_input("chunkwise queries need a chunk size"))?;
            let mut total = EventCost::default();
            for j in 1..=m {
                total.add(decode_step_cost(q.variant, q.d, j));
            }
            total.add(flush_cost(q.variant, q.d, m));
            let read = rat(total.read_bytes) / rat(m);
            let write = rat(total.write_bytes) / rat(m);
            let flops = rat(total.flops) / rat(m);
            Ok(CostProfile {
                storage_bytes: rat(state_bytes(q.d) + m * record_bytes(q.variant, q.d)),
                read_bytes_per_token: read,
                write_bytes_per_token: write,
                flop_count: flops,
                arithmetic_intensity: intensity(flops, read, write),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Speedup formulas
// ---------------------------------------------------------------------------

/// Recurrent-to-chunkwise memory-access ratio: `4(d+1) / (2d + 4d/m + m + 7)`.
pub fn chunkwise_speedup_rational(d: u64, m: u64) -> Rational64 {
    let d = rat(d);
    let m = rat(m);
    rat(4) * (d + rat(1)) / (rat(2) * d + rat(4) * d / m + m + rat(7))
}

pub fn chunkwise_speedup(d: u64, m: u64) -> f64 {
    chunkwise_speedup_rational(d, m).to_f64().unwrap()
}

/// Integer buffer size maximizing [`chunkwise_speedup`], by exhaustive
/// search over `m` in `[1, 4d]`, ties broken toward smaller `m`.
///
/// Maximizing the speedup is minimizing `4d/m + m`, compared here by
/// integer cross-multiplication so the search is exact.
pub fn optimal_buffer_size(d: u64) -> u64 {
    assert!(d >= 1);
    let mut best_m = 1u64;
    for m in 2..=(4 * d) {
        let lhs = (4 * d + m * m) as u128 * best_m as u128;
        let rhs = (4 * d + best_m * best_m) as u128 * m as u128;
        if lhs < rhs {
            best_m = m;
        }
    }
    best_m
}

/// Verification memory-access ratio for `m` draft tokens:
/// `((m+1)d + 2m) / (3d + 4m)`; approaches `(m+1)/3` for `d >> m`.
pub fn verify_speedup_rational(d: u64, m: u64) -> Rational64 {
    let d = rat(d);
    let m = rat(m);
    ((m + rat(1)) * d + rat(2) * m) / (rat(3) * d + rat(4) * m)
}

pub fn verify_speedup(d: u64, m: u64) -> f64 {
    verify_speedup_rational(d, m).to_f64().unwrap()
}

/// KV-only over chunkwise memory-access ratio at context length `L`:
/// `(d + 2d/m + m/2 + 7/2) / (L + 2)`.
pub fn kv_only_speedup_rational(d: u64, m: u64, l: u64) -> Rational64 {
    let d = rat(d);
    let m = rat(m);
    let l = rat(l);
    (d + rat(2) * d / m + m / rat(2) + Rational64::new(7, 2)) / (l + rat(2))
}

pub fn kv_only_speedup(d: u64, m: u64, l: u64) -> f64 {
    kv_only_speedup_rational(d, m, l).to_f64().unwrap()
}

/// Context length at which the KV-only speedup crosses 1:
/// `L* = d + 2d/m + m/2 + 3/2`.
pub fn crossover_context_len_rational(d: u64, m: u64) -> Rational64 {
    let d = rat(d);
    let m = rat(m);
    d + rat(2) * d / m + m / rat(2) + Rational64::new(3, 2)
}

pub fn crossover_context_len(d: u64, m: u64) -> f64 {
    crossover_context_len_rational(d, m).to_f64().unwrap()
}

/// The three GDN speedup ratios (chunkwise decode, buffered verification,
/// KV-only decode), before any asymptotic simplification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GdnSpeedups {
    pub chunkwise: Rational64,
    pub parallel_verify: Rational64,
    pub kv_only: Rational64,
}

/// Exact GDN ratios: `m` is the chunk size for `chunkwise`, the draft count
/// for `parallel_verify`; `l` is the context length for `kv_only`.
pub fn gdn_speedups_rational(d: u64, m: u64, l: u64) -> GdnSpeedups {
    let dr = rat(d);
    let mr = rat(m);
    let lr = rat(l);
    let chunk_total =
        rat(4) * dr * dr + rat(8) * dr * dr / mr + rat(2) * mr * dr + rat(14) * dr + mr + rat(7);
    GdnSpeedups {
        chunkwise: (rat(8) * dr * dr + rat(8) * dr + rat(4)) / chunk_total,
        parallel_verify: (rat(4) * (mr + rat(1)) * dr * dr + rat(8) * mr * dr + rat(4) * mr)
            / (rat(12) * dr * dr + rat(16) * mr * dr + rat(8) * mr),
        kv_only: chunk_total / (rat(4) * lr * dr + rat(8) * dr + rat(2) * lr + rat(4)),
    }
}

pub fn gdn_speedups(d: u64, m: u64, l: u64) -> (f64, f64, f64) {
    let s = gdn_speedups_rational(d, m, l);
    (
        s.chunkwise.to_f64().unwrap(),
        s.parallel_verify.to_f64().unwrap(),
        s.kv_only.to_f64().unwrap(),
    )
}

/// Arithmetic intensity of the batched state update: `m / (4 + 2m/d)`.
pub fn state_update_intensity_rational(d: u64, m: u64) -> Rational64 {
    rat(m) / (rat(4) + rat(2) * rat(m) / rat(d))
}

// ---------------------------------------------------------------------------
// Capacity
// ---------------------------------------------------------------------------

/// Maximum concurrent requests within `pool_bytes` when each request needs
/// one state plus, per verification strategy for `n` draft tokens, either
/// `n` temporary states or `n` buffered records.
pub fn capacity(
    state_bytes_per_req: u64,
    record_bytes_per_token: u64,
    pool_bytes: u64,
    n_draft: u64,
    mode: VerifyMode,
) -> u64 {
    match mode {
        VerifyMode::RecurrentBaseline => pool_bytes / ((n_draft + 1) * state_bytes_per_req),
        VerifyMode::KvBuffered => {
            pool_bytes / (state_bytes_per_req + n_draft * record_bytes_per_token)
        }
    }
}

// ---------------------------------------------------------------------------
// Latency model
// ---------------------------------------------------------------------------

/// Analytic latency: `bytes / bandwidth + kernels * overhead`. All outputs
/// derived from this model are estimates, not measurements; the defaults
/// are a contemporary ~864 GB/s accelerator and a 5 microsecond launch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub bandwidth_bytes_per_s: f64,
    pub kernel_overhead_s: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            bandwidth_bytes_per_s: 864e9,
            kernel_overhead_s: 5e-6,
        }
    }
}

impl LatencyModel {
    pub fn new(bandwidth_bytes_per_s: f64, kernel_overhead_s: f64) -> Result<Self> {
        if !(bandwidth_bytes_per_s.is_finite() && bandwidth_bytes_per_s > 0.0) {
            return Err(Error::config("bandwidth must be positive"));
        }
        if !(kernel_overhead_s.is_finite() && kernel_overhead_s >= 0.0) {
            return Err(Error::config("kernel overhead must be non-negative"));
        }
        Ok(LatencyModel {
            bandwidth_bytes_per_s,
            kernel_overhead_s,
        })
    }

    pub fn latency_s(&self, bytes: u64, kernels: u32) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s + kernels as f64 * self.kernel_overhead_s
    }
}
