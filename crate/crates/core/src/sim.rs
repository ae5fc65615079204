//! Analytic workload simulator and report generators.
//!
//! Time here is modeled, never measured: every latency is
//! `bytes / bandwidth + kernels * overhead` with byte counts from
//! [`crate::cost`], so each reported number can be audited from the engine
//! trace. The serving simulation is event-driven over two event kinds,
//! request arrivals and batch-step completions: all live requests advance
//! together one decode step (or one verify cycle of `N` drafts plus the
//! correction token), the step's latency is the batched byte traffic of the
//! whole batch plus the largest per-request launch count, and the clock
//! jumps to the next arrival whenever the batch empties.
//!
//! Admission reserves each request's peak resource needs up front: one
//! state slot plus, under recurrent-baseline verification, the `N`
//! temporary slots its verify steps will occupy simultaneously with every
//! other in-flight request. Waiting requests queue FIFO; a request that
//! could never fit even an empty pool is rejected outright.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::PoolConfig;
use crate::cost::{self, LatencyModel, VerifyMode};
use crate::engine::{DecodeEngine, DecodeToken, DraftBatch, EngineConfig, RateAcceptance};
use crate::equiv::{random_gdn_tokens, random_vanilla_tokens};
use crate::error::{Error, Result};
use crate::{PoolStats, Variant};

/// Report schema identifier.
pub const REPORT_SCHEMA: &str = "linbuf-report/1";

/// Request arrival process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Poisson arrivals at `rate_per_s` for `duration_s` of modeled time.
    Open { rate_per_s: f64, duration_s: f64 },
    /// All requests present at time zero, at most `batch_size` in flight.
    Closed { batch_size: usize, num_requests: usize },
}

/// Token-count distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LenDist {
    Fixed { n: usize },
    Uniform { min: usize, max: usize },
}

impl LenDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            LenDist::Fixed { n } => n,
            LenDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LenDist::Fixed { .. } => Ok(()),
            LenDist::Uniform { min, max } if min <= max => Ok(()),
            _ => Err(Error::config("uniform length needs min <= max")),
        }
    }
}

/// Synthetic workload description. Real traces can be replayed by loading
/// a JSONL file of `{prompt_len, decode_len}` pairs instead of sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub arrival: Arrival,
    pub prompt_len: LenDist,
    pub decode_len: LenDist,
    /// Per-draft-token acceptance probability, truncated to a prefix.
    pub acceptance_rate: f64,
    pub seed: u64,
    /// Safety bound on simulated batch steps.
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
}

fn default_max_steps() -> u64 {
    1_000_000
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        self.prompt_len.validate()?;
        self.decode_len.validate()?;
        if !(self.acceptance_rate.is_finite() && (0.0..=1.0).contains(&self.acceptance_rate)) {
            return Err(Error::config("acceptance_rate must lie in [0, 1]"));
        }
        match self.arrival {
            Arrival::Open {
                rate_per_s,
                duration_s,
            } => {
                if !(rate_per_s.is_finite() && rate_per_s > 0.0)
                    || !(duration_s.is_finite() && duration_s > 0.0)
                {
                    return Err(Error::config("open arrival needs positive rate and duration"));
                }
            }
            Arrival::Closed { batch_size, .. } => {
                if batch_size == 0 {
                    return Err(Error::config("closed arrival needs batch_size >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// One request replayed from a trace file.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRequest {
    pub prompt_len: usize,
    pub decode_len: usize,
}

/// Parse a JSONL trace of `{prompt_len, decode_len}` records.
pub fn parse_request_trace(text: &str) -> Result<Vec<TraceRequest>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let req: TraceRequest = serde_json::from_str(line)
            .map_err(|e| Error::config(format!("trace line {}: {e}", i + 1)))?;
        out.push(req);
    }
    Ok(out)
}

/// Simulation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub schema: String,
    pub arrived: u64,
    pub admitted: u64,
    pub rejected: u64,
    pub completed: u64,
    /// Requests that had to wait for capacity before admission.
    pub admission_failures: u64,
    pub max_concurrent: usize,
    pub steps: u64,
    pub tokens_generated: u64,
    pub wall_time_modeled_s: f64,
    pub throughput_tokens_per_s: f64,
    /// Modeled latency of every batch step, in order.
    pub latency_series_s: Vec<f64>,
    pub pool_snapshots: Vec<PoolStats>,
}

struct PendingRequest {
    id: u64,
    arrival_s: f64,
    prompt_len: usize,
    decode_len: usize,
    deferred: bool,
}

struct LiveRequest {
    id: u64,
    remaining: usize,
    token_rng: ChaCha8Rng,
    oracle: RateAcceptance,
}

fn make_token(variant: Variant, d: usize, rng: &mut ChaCha8Rng) -> DecodeToken {
    let seed = rng.random::<u64>();
    match variant {
        Variant::Vanilla => {
            DecodeToken::Vanilla(random_vanilla_tokens(d, 1, seed).remove(0))
        }
        Variant::Gdn => {
            DecodeToken::Gdn(random_gdn_tokens(d, 1, seed, (0.5, 1.0), (0.0, 1.0)).remove(0))
        }
    }
}

fn make_tokens(variant: Variant, d: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<DecodeToken> {
    (0..n).map(|_| make_token(variant, d, rng)).collect()
}

/// Peak resource reservation for one request, used by admission.
fn request_needs(
    cfg: &EngineConfig,
    block_size: usize,
    prompt_len: usize,
    decode_len: usize,
) -> (usize, usize) {
    let d = cfg.head_dim();
    let m = cfg.buffer_size();
    let n = cfg.draft_len;
    // A verify cycle can overshoot the decode budget by up to n tokens.
    let final_ctx = prompt_len + decode_len + n;
    if cfg.kv_only_enabled && prompt_len < d && final_ctx < d {
        // Never transitions: no state, all records buffered.
        return (0, final_ctx.div_ceil(block_size));
    }
    let states = match cfg.verify_mode {
        VerifyMode::RecurrentBaseline if n > 0 => 1 + n,
        _ => 1,
    };
    let mut blocks = m.div_ceil(block_size);
    if cfg.verify_mode == VerifyMode::KvBuffered && n > 0 {
        blocks = blocks.max(n.div_ceil(block_size));
    }
    if cfg.kv_only_enabled && prompt_len < d {
        blocks = blocks.max(d.div_ceil(block_size));
    }
    (states, blocks)
}

/// Run the serving simulation. Deterministic given the workload seed.
pub fn simulate(
    spec: &WorkloadSpec,
    engine_cfg: EngineConfig,
    pool_cfg: PoolConfig,
    latency: &LatencyModel,
) -> Result<SimReport> {
    simulate_with_requests(spec, engine_cfg, pool_cfg, latency, None)
}

/// Like [`simulate`], but with prompt/decode lengths replayed from a trace
/// instead of sampled. Arrival timing still follows `spec.arrival`: Poisson
/// spacing for open loops (one arrival per trace entry), all-at-zero for
/// closed loops.
pub fn simulate_with_requests(
    spec: &WorkloadSpec,
    engine_cfg: EngineConfig,
    pool_cfg: PoolConfig,
    latency: &LatencyModel,
    trace: Option<&[TraceRequest]>,
) -> Result<SimReport> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = engine_cfg.head_dim();
    let block_size = pool_cfg.block_size;
    let n_draft = engine_cfg.draft_len;

    // Materialize arrivals.
    let mut pending: Vec<PendingRequest> = Vec::new();
    let mut lens = |rng: &mut ChaCha8Rng, id: u64| -> Option<(usize, usize)> {
        match trace {
            Some(reqs) => reqs
                .get(id as usize)
                .map(|r| (r.prompt_len, r.decode_len.max(1))),
            None => Some((
                spec.prompt_len.sample(rng),
                spec.decode_len.sample(rng).max(1),
            )),
        }
    };
    let batch_cap = match spec.arrival {
        Arrival::Open {
            rate_per_s,
            duration_s,
        } => {
            let mut t = 0.0;
            let mut id = 0u64;
            loop {
                let u: f64 = rng.random::<f64>().max(1e-300);
                t += -u.ln() / rate_per_s;
                if trace.is_none() && t > duration_s {
                    break;
                }
                let Some((prompt_len, decode_len)) = lens(&mut rng, id) else {
                    break;
                };
                pending.push(PendingRequest {
                    id,
                    arrival_s: t,
                    prompt_len,
                    decode_len,
                    deferred: false,
                });
                id += 1;
            }
            usize::MAX
        }
        Arrival::Closed {
            batch_size,
            num_requests,
        } => {
            let count = trace.map_or(num_requests, <[TraceRequest]>::len);
            for id in 0..count as u64 {
                let Some((prompt_len, decode_len)) = lens(&mut rng, id) else {
                    break;
                };
                pending.push(PendingRequest {
                    id,
                    arrival_s: 0.0,
                    prompt_len,
                    decode_len,
                    deferred: false,
                });
            }
            batch_size
        }
    };
    let arrived = pending.len() as u64;
    pending.reverse(); // pop() yields arrival order

    let mut engine = DecodeEngine::new(engine_cfg, pool_cfg)?;
    let mut live: Vec<LiveRequest> = Vec::new();
    let mut clock = 0.0f64;
    let mut steps = 0u64;
    let mut tokens_generated = 0u64;
    let mut admitted = 0u64;
    let mut rejected = 0u64;
    let mut completed = 0u64;
    let mut admission_failures = 0u64;
    let mut max_concurrent = 0usize;
    let mut latency_series = Vec::new();
    let mut snapshots = Vec::new();
    let snapshot_every = 100u64;

    let total_states = engine.pool().config().num_state_slots;
    let total_blocks = engine.pool().config().num_blocks;
    let mut reserved_states = 0usize;
    let mut reserved_blocks = 0usize;

    loop {
        // Admit everything the capacity rule allows, FIFO.
        while let Some(head) = pending.last() {
            if head.arrival_s > clock {
                break;
            }
            let (need_states, need_blocks) =
                request_needs(&engine_cfg, block_size, head.prompt_len, head.decode_len);
            if need_states > total_states || need_blocks > total_blocks {
                // Could never fit, even alone.
                rejected += 1;
                pending.pop();
                continue;
            }
            let fits = reserved_states + need_states <= total_states
                && reserved_blocks + need_blocks <= total_blocks
                && live.len() < batch_cap;
            if !fits {
                let head = pending.last_mut().expect("checked above");
                if !head.deferred {
                    head.deferred = true;
                    admission_failures += 1;
                }
                break;
            }
            let req = pending.pop().expect("checked above");
            let mut token_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (req.id.wrapping_mul(0x9e3779b97f4a7c15)));
            let prompt = make_tokens(engine_cfg.variant, d, req.prompt_len, &mut token_rng);
            engine.prefill(req.id, &prompt)?;
            let oracle = RateAcceptance::new(
                spec.acceptance_rate,
                spec.seed ^ req.id.wrapping_mul(0x517cc1b727220a95),
            )?;
            live.push(LiveRequest {
                id: req.id,
                remaining: req.decode_len,
                token_rng,
                oracle,
            });
            reserved_states += need_states;
            reserved_blocks += need_blocks;
            admitted += 1;
        }
        max_concurrent = max_concurrent.max(live.len());

        if live.is_empty() {
            match pending.last() {
                Some(head) => {
                    // Idle until the next arrival.
                    clock = clock.max(head.arrival_s);
                    continue;
                }
                None => break,
            }
        }

        // One batched step across all live requests.
        if steps >= spec.max_steps {
            return Err(Error::config(format!(
                "simulation exceeded max_steps = {}",
                spec.max_steps
            )));
        }
        steps += 1;
        let mut step_bytes = 0u64;
        let mut step_kernels = 0u32;
        live.sort_by_key(|r| r.id);
        let mut finished: Vec<u64> = Vec::new();
        for req in live.iter_mut() {
            let mut gained = 0usize;
            if n_draft > 0 {
                let drafts = make_tokens(engine_cfg.variant, d, n_draft, &mut req.token_rng);
                let mut batch = DraftBatch::new(drafts)?;
                engine.verify_draft(req.id, &mut batch, &mut req.oracle)?;
                let cost = engine.last_step_cost();
                step_bytes += cost.total_bytes();
                step_kernels = step_kernels.max(cost.kernels);
                gained += batch.accepted_len.unwrap_or(0);
            }
            // The correction token every cycle emits (the lone decode when
            // no drafts are configured).
            let tok = make_token(engine_cfg.variant, d, &mut req.token_rng);
            engine.decode_step(req.id, &tok)?;
            let cost = engine.last_step_cost();
            step_bytes += cost.total_bytes();
            step_kernels = step_kernels.max(cost.kernels);
            gained += 1;

            tokens_generated += gained as u64;
            req.remaining = req.remaining.saturating_sub(gained);
            if req.remaining == 0 {
                finished.push(req.id);
            }
        }
        clock += latency.latency_s(step_bytes, step_kernels);
        latency_series.push(latency.latency_s(step_bytes, step_kernels));

        for id in finished {
            engine.finish_request(id)?;
            let idx = live.iter().position(|r| r.id == id).expect("present");
            let req = live.remove(idx);
            let _ = req;
            completed += 1;
        }
        // Reservation bookkeeping mirrors admission.
        reserved_states = 0;
        reserved_blocks = 0;
        for r in &live {
            let slot = engine.slot(r.id).expect("live request");
            let (s, b) = request_needs(&engine_cfg, block_size, slot.context_len, r.remaining);
            reserved_states += s;
            reserved_blocks += b;
        }

        if steps % snapshot_every == 0 {
            snapshots.push(engine.pool().stats());
        }
    }

    snapshots.push(engine.pool().stats());
    let throughput = if clock > 0.0 {
        tokens_generated as f64 / clock
    } else {
        0.0
    };
    Ok(SimReport {
        schema: REPORT_SCHEMA.to_string(),
        arrived,
        admitted,
        rejected,
        completed,
        admission_failures,
        max_concurrent,
        steps,
        tokens_generated,
        wall_time_modeled_s: clock,
        throughput_tokens_per_s: throughput,
        latency_series_s: latency_series,
        pool_snapshots: snapshots,
    })
}

// ---------------------------------------------------------------------------
// Buffer-size sweep
// ---------------------------------------------------------------------------

/// One sweep point: modeled chunkwise step latency (averaged over a full
/// cycle of `m` decode steps plus the flush) normalized by the recurrent
/// step latency at the same batch size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: u64,
    pub m: u64,
    pub batch_size: u64,
    pub chunkwise_modeled_s: f64,
    pub recurrent_modeled_s: f64,
    pub normalized_latency: f64,
}

pub fn sweep_buffer(
    d: u64,
    m_list: &[u64],
    batch_sizes: &[u64],
    variant: Variant,
    latency: &LatencyModel,
) -> Result<Vec<SweepRow>> {
    if m_list.is_empty() {
        return Err(Error::config("sweep needs a non-empty buffer-size list"));
    }
    let mut rows = Vec::new();
    for &m in m_list {
        if m == 0 {
            return Err(Error::config("buffer sizes must be >= 1"));
        }
        for &batch in batch_sizes {
            let mut cycle = 0.0;
            for j in 1..=m {
                let ev = cost::decode_step_cost(variant, d, j);
                cycle += latency.latency_s(batch * ev.total_bytes(), 1);
            }
            let flush = cost::flush_cost(variant, d, m);
            cycle += latency.latency_s(batch * flush.total_bytes(), 1);
            let chunkwise = cycle / m as f64;
            let rec = cost::recurrent_step_cost(variant, d, true);
            let recurrent = latency.latency_s(batch * rec.total_bytes(), 1);
            rows.push(SweepRow {
                d,
                m,
                batch_size: batch,
                chunkwise_modeled_s: chunkwise,
                recurrent_modeled_s: recurrent,
                normalized_latency: chunkwise / recurrent,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Short-context crossover
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub context_len: u64,
    pub parallel_modeled_s: f64,
    pub chunkwise_modeled_s: f64,
    pub recurrent_modeled_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub d: u64,
    pub m: u64,
    pub rows: Vec<CrossoverRow>,
    /// First context length at which the parallel form costs more than
    /// chunkwise decoding.
    pub crossover_context_len: Option<u64>,
    /// Algebraic crossover `d + 2d/m + m/2 + 3/2`.
    pub predicted_crossover: f64,
    pub crossover_at_or_beyond_head_dim: bool,
}

/// Modeled per-step latency of the three forms for `L = 1..=2d`, marking
/// where the parallel form first exceeds chunkwise.
pub fn crossover_report(
    d: u64,
    m: u64,
    variant: Variant,
    latency: &LatencyModel,
) -> Result<CrossoverReport> {
    if d == 0 || m == 0 {
        return Err(Error::config("crossover needs d >= 1 and m >= 1"));
    }
    let mut cycle = 0.0;
    for j in 1..=m {
        let ev = cost::decode_step_cost(variant, d, j);
        cycle += latency.latency_s(ev.total_bytes(), 1);
    }
    cycle += latency.latency_s(cost::flush_cost(variant, d, m).total_bytes(), 1);
    let chunkwise = cycle / m as f64;
    let recurrent = latency.latency_s(
        cost::recurrent_step_cost(variant, d, true).total_bytes(),
        1,
    );

    let mut rows = Vec::new();
    let mut crossover = None;
    for l in 1..=2 * d {
        let parallel = latency.latency_s(cost::kv_only_step_cost(variant, d, l).total_bytes(), 1);
        if parallel > chunkwise && crossover.is_none() {
            crossover = Some(l);
        }
        rows.push(CrossoverRow {
            context_len: l,
            parallel_modeled_s: parallel,
            chunkwise_modeled_s: chunkwise,
            recurrent_modeled_s: recurrent,
        });
    }
    Ok(CrossoverReport {
        d,
        m,
        rows,
        crossover_context_len: crossover,
        predicted_crossover: cost::crossover_context_len(d, m),
        crossover_at_or_beyond_head_dim: crossover.is_none_or(|l| l >= d),
    })
}

// ---------------------------------------------------------------------------
// Verification benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyBenchRow {
    pub d: u64,
    pub n_draft: u64,
    pub mode: VerifyMode,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub modeled_latency_s: f64,
    pub speedup_vs_recurrent: f64,
}

/// Modeled verification latency versus draft count, for both strategies.
/// Buffered verification assumes all drafts accepted (outputs pass plus a
/// full state update); the baseline is one fused recurrent pass.
pub fn verify_bench(
    d: u64,
    n_list: &[u64],
    variant: Variant,
    latency: &LatencyModel,
) -> Result<Vec<VerifyBenchRow>> {
    if n_list.is_empty() {
        return Err(Error::config("verify bench needs a non-empty draft list"));
    }
    let mut rows = Vec::new();
    for &n in n_list {
        if n == 0 {
            return Err(Error::config("draft counts must be >= 1"));
        }
        let rec = cost::recurrent_verify_cost(variant, d, n);
        let rec_latency = latency.latency_s(rec.total_bytes(), 1);
        rows.push(VerifyBenchRow {
            d,
            n_draft: n,
            mode: VerifyMode::RecurrentBaseline,
            read_bytes: rec.read_bytes,
            write_bytes: rec.write_bytes,
            modeled_latency_s: rec_latency,
            speedup_vs_recurrent: 1.0,
        });
        let outputs = cost::verify_outputs_cost(variant, d, n);
        let update = cost::verify_state_update_cost(variant, d, n);
        let bytes = outputs.total_bytes() + update.total_bytes();
        let kv_latency = latency.latency_s(bytes, 2);
        rows.push(VerifyBenchRow {
            d,
            n_draft: n,
            mode: VerifyMode::KvBuffered,
            read_bytes: outputs.read_bytes + update.read_bytes,
            write_bytes: outputs.write_bytes + update.write_bytes,
            modeled_latency_s: kv_latency,
            speedup_vs_recurrent: rec_latency / kv_latency,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{chunkwise_speedup, optimal_buffer_size, verify_speedup};
    use crate::linear_attn::{AttnConfig, Precision};

    fn engine_cfg(d: usize, m: usize, n: usize, mode: VerifyMode) -> EngineConfig {
        EngineConfig {
            attn: AttnConfig::new(d, m, Precision::Fp64Reference).unwrap(),
            variant: Variant::Vanilla,
            draft_len: n,
            verify_mode: mode,
            kv_only_enabled: false,
        }
    }

    fn pool(d: usize, blocks: usize, states: usize) -> PoolConfig {
        PoolConfig::new(
            8,
            blocks,
            states,
            cost::record_bytes(Variant::Vanilla, d as u64),
            cost::state_bytes(d as u64),
        )
        .unwrap()
    }

    fn spec(seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            arrival: Arrival::Closed {
                batch_size: 64,
                num_requests: 24,
            },
            prompt_len: LenDist::Fixed { n: 6 },
            decode_len: LenDist::Uniform { min: 4, max: 12 },
            acceptance_rate: 1.0,
            seed,
            max_steps: default_max_steps(),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = engine_cfg(8, 4, 4, VerifyMode::KvBuffered);
        let lat = LatencyModel::default();
        let a = simulate(&spec(7), cfg, pool(8, 64, 32), &lat).unwrap();
        let b = simulate(&spec(7), cfg, pool(8, 64, 32), &lat).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = simulate(&spec(8), cfg, pool(8, 64, 32), &lat).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn conservation_of_requests() {
        let cfg = engine_cfg(8, 4, 2, VerifyMode::RecurrentBaseline);
        let lat = LatencyModel::default();
        let report = simulate(&spec(11), cfg, pool(8, 32, 9), &lat).unwrap();
        assert_eq!(report.arrived, report.admitted + report.rejected);
        assert!(report.completed <= report.admitted);
        assert_eq!(report.completed, report.admitted);
        assert!(report.tokens_generated > 0);
    }

    #[test]
    fn max_concurrency_ratio_is_five_for_four_drafts() {
        // State-dominated sizing: plenty of blocks, 20 state slots.
        let lat = LatencyModel::default();
        let mut s = spec(13);
        s.arrival = Arrival::Closed {
            batch_size: 256,
            num_requests: 60,
        };
        s.decode_len = LenDist::Fixed { n: 40 };
        let rec = simulate(
            &s,
            engine_cfg(8, 1, 4, VerifyMode::RecurrentBaseline),
            pool(8, 256, 20),
            &lat,
        )
        .unwrap();
        let kv = simulate(
            &s,
            engine_cfg(8, 1, 4, VerifyMode::KvBuffered),
            pool(8, 256, 20),
            &lat,
        )
        .unwrap();
        assert_eq!(rec.max_concurrent, 4);
        assert_eq!(kv.max_concurrent, 20);
        assert_eq!(kv.max_concurrent as f64 / rec.max_concurrent as f64, 5.0);
        assert!(kv.throughput_tokens_per_s > rec.throughput_tokens_per_s);
    }

    #[test]
    fn no_drafts_means_identical_reports_across_modes() {
        let lat = LatencyModel::default();
        let a = simulate(
            &spec(17),
            engine_cfg(8, 4, 0, VerifyMode::RecurrentBaseline),
            pool(8, 32, 8),
            &lat,
        )
        .unwrap();
        let b = simulate(
            &spec(17),
            engine_cfg(8, 4, 0, VerifyMode::KvBuffered),
            pool(8, 32, 8),
            &lat,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn open_loop_low_rate_throughput_tracks_rate() {
        let lat = LatencyModel::default();
        let mut s = spec(19);
        s.arrival = Arrival::Open {
            rate_per_s: 2000.0,
            duration_s: 1.0,
        };
        s.prompt_len = LenDist::Fixed { n: 4 };
        s.decode_len = LenDist::Fixed { n: 8 };
        s.acceptance_rate = 1.0;
        let cfg = engine_cfg(8, 4, 0, VerifyMode::KvBuffered);
        let report = simulate(&s, cfg, pool(8, 64, 32), &lat).unwrap();
        // Service is far faster than arrivals here, so throughput over the
        // whole run approaches rate * tokens-per-request.
        let expected = report.arrived as f64 * 8.0 / report.wall_time_modeled_s;
        let ratio = report.throughput_tokens_per_s / expected;
        assert!((0.99..=1.01).contains(&ratio), "ratio {ratio}");
        assert_eq!(report.rejected, 0);
    }

    #[test]
    fn sweep_minimum_sits_at_optimal_buffer_size() {
        let d = 128;
        let lat = LatencyModel::new(864e9, 0.0).unwrap();
        let m_list: Vec<u64> = (1..=64).collect();
        let rows = sweep_buffer(d, &m_list, &[1], Variant::Vanilla, &lat).unwrap();
        let best = rows
            .iter()
            .min_by(|a, b| a.normalized_latency.total_cmp(&b.normalized_latency))
            .unwrap();
        let opt = optimal_buffer_size(d);
        assert!(
            (best.m as i64 - opt as i64).abs() <= 1,
            "min at {} expected near {opt}",
            best.m
        );
        // At the optimum the normalized latency is the inverse speedup.
        let at_opt = rows.iter().find(|r| r.m == opt).unwrap();
        let want = 1.0 / chunkwise_speedup(d, opt);
        assert!((at_opt.normalized_latency - want).abs() <= 1e-12);
    }

    #[test]
    fn sweep_m1_not_faster_with_overhead() {
        let lat = LatencyModel::default();
        let rows = sweep_buffer(128, &[1], &[1, 8, 64], Variant::Vanilla, &lat).unwrap();
        for r in rows {
            assert!(r.normalized_latency >= 1.0);
        }
    }

    #[test]
    fn crossover_matches_algebra() {
        let d = 128;
        let m = 23;
        let lat = LatencyModel::new(864e9, 0.0).unwrap();
        let report = crossover_report(d, m, Variant::Vanilla, &lat).unwrap();
        let lstar = report.predicted_crossover;
        let mark = report.crossover_context_len.unwrap() as f64;
        assert!((mark - lstar).abs() <= 1.0, "mark {mark} vs {lstar}");
        assert!(report.crossover_at_or_beyond_head_dim);
        // Parallel latency grows strictly with context length.
        for w in report.rows.windows(2) {
            assert!(w[1].parallel_modeled_s > w[0].parallel_modeled_s);
        }
        // Parallel is cheaper than chunkwise everywhere below d.
        for row in &report.rows {
            if row.context_len < d {
                assert!(row.parallel_modeled_s < row.chunkwise_modeled_s);
            }
        }
        // The speedup at the marked crossover is 1 within 1%.
        let s = cost::kv_only_speedup(d, m, report.crossover_context_len.unwrap());
        assert!((0.99..=1.01).contains(&s), "speedup {s}");
    }

    #[test]
    fn verify_bench_speedups_match_formula_without_overhead() {
        let d = 128;
        let lat = LatencyModel::new(864e9, 0.0).unwrap();
        let rows = verify_bench(d, &[1, 2, 4, 8], Variant::Vanilla, &lat).unwrap();
        for row in rows.iter().filter(|r| r.mode == VerifyMode::KvBuffered) {
            let want = verify_speedup(d, row.n_draft);
            assert!(
                (row.speedup_vs_recurrent - want).abs() <= 1e-12,
                "n={} got {} want {want}",
                row.n_draft,
                row.speedup_vs_recurrent
            );
        }
        // The baseline writes one temporary state per draft, so its latency
        // climbs steeply with n; buffered verification only adds records.
        let rec: Vec<&VerifyBenchRow> = rows
            .iter()
            .filter(|r| r.mode == VerifyMode::RecurrentBaseline)
            .collect();
        let kv: Vec<&VerifyBenchRow> = rows
            .iter()
            .filter(|r| r.mode == VerifyMode::KvBuffered)
            .collect();
        assert!(rec[3].modeled_latency_s > 4.0 * rec[0].modeled_latency_s);
        assert!(kv[3].modeled_latency_s < 1.5 * kv[0].modeled_latency_s);
    }

    #[test]
    fn trace_file_parsing() {
        let text = "{\"prompt_len\": 10, \"decode_len\": 20}\n\n{\"prompt_len\": 3, \"decode_len\": 4}\n";
        let reqs = parse_request_trace(text).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].prompt_len, 10);
        assert!(parse_request_trace("{\"bogus\": 1}").is_err());
    }
}
