//! Decode engine: serves requests out of the paged pools using whichever
//! computation form fits the moment.
//!
//! * Chunkwise decoding: per-token outputs combine the stale state with the
//!   buffered records of the current chunk; the state update is deferred
//!   until the buffer holds `m` records and is then applied in one batch
//!   (the flush).
//! * Speculative verification: draft tokens are either buffered and
//!   verified in one chunkwise pass with a single state update over the
//!   accepted prefix (`kv_buffered`), or run through sequential recurrent
//!   steps with one temporary state per draft token (`recurrent_baseline`).
//! * KV-only decoding: while the context is shorter than the head
//!   dimension, requests hold no state at all; outputs come straight from
//!   the buffered records in parallel form. When the context reaches `d`
//!   the records are compressed into a freshly allocated state and the
//!   request switches to chunkwise decoding, once, never back.
//!
//! The engine owns its pool exclusively and iterates batches in ascending
//! request id, so identical inputs replay identically. Per-step modeled
//! byte counts come from [`crate::cost`] and are exposed through the trace.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{Phase, Pool, PoolConfig, RequestSlot, TokenRecord};
use crate::cost;
pub use crate::cost::VerifyMode;
use crate::error::{Error, Result};
use crate::gdn::{self, GdnBufferedToken, GdnToken};
use crate::linear_attn::{
    chunk_state_update, chunkwise_attend, recurrent_step, AttnConfig, ChunkWorkspace, HeadState,
    Precision, TokenQkv,
};
use crate::math::Mat;
use crate::Variant;

/// Engine-level configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub attn: AttnConfig,
    pub variant: Variant,
    /// Draft tokens per verification step.
    pub draft_len: usize,
    pub verify_mode: VerifyMode,
    /// Serve contexts shorter than the head dimension without a state.
    pub kv_only_enabled: bool,
}

impl EngineConfig {
    pub fn buffer_size(&self) -> usize {
        self.attn.chunk_size
    }

    pub fn head_dim(&self) -> usize {
        self.attn.head_dim
    }
}

/// One incoming token, matching the engine's variant.
#[derive(Debug, Clone)]
pub enum DecodeToken {
    Vanilla(TokenQkv),
    Gdn(GdnToken),
}

impl DecodeToken {
    pub fn variant(&self) -> Variant {
        match self {
            DecodeToken::Vanilla(_) => Variant::Vanilla,
            DecodeToken::Gdn(_) => Variant::Gdn,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DecodeToken::Vanilla(t) => t.dim(),
            DecodeToken::Gdn(t) => t.dim(),
        }
    }
}

/// A batch of draft tokens awaiting verification. `accepted_len` is filled
/// in by [`DecodeEngine::verify_draft`]; accepted tokens always form a
/// prefix of the batch.
#[derive(Debug, Clone)]
pub struct DraftBatch {
    pub tokens: Vec<DecodeToken>,
    pub accepted_len: Option<usize>,
}

impl DraftBatch {
    pub fn new(tokens: Vec<DecodeToken>) -> Result<Self> {
        if let Some(first) = tokens.first() {
            let variant = first.variant();
            if tokens.iter().any(|t| t.variant() != variant) {
                return Err(Error::invalid_input("draft tokens must share one variant"));
            }
        }
        Ok(DraftBatch {
            tokens,
            accepted_len: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Decides how many draft tokens are accepted, given their outputs. The
/// result must not exceed the draft length; accepted tokens form a prefix.
pub trait AcceptanceOracle {
    fn accepted_len(&mut self, outputs: &[Vec<f64>]) -> usize;
}

impl<F: FnMut(&[Vec<f64>]) -> usize> AcceptanceOracle for F {
    fn accepted_len(&mut self, outputs: &[Vec<f64>]) -> usize {
        self(outputs)
    }
}

/// Always accepts a fixed prefix length.
#[derive(Debug, Clone, Copy)]
pub struct FixedAcceptance(pub usize);

impl AcceptanceOracle for FixedAcceptance {
    fn accepted_len(&mut self, _outputs: &[Vec<f64>]) -> usize {
        self.0
    }
}

/// Accepts each draft token independently with probability `p`, truncated
/// at the first rejection so the result is a prefix. Deterministic given
/// the seed.
#[derive(Debug, Clone)]
pub struct RateAcceptance {
    p: f64,
    rng: ChaCha8Rng,
}

impl RateAcceptance {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            return Err(Error::invalid_input("acceptance rate must lie in [0, 1]"));
        }
        Ok(RateAcceptance {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl AcceptanceOracle for RateAcceptance {
    fn accepted_len(&mut self, outputs: &[Vec<f64>]) -> usize {
        let mut n = 0;
        for _ in outputs {
            if self.rng.random::<f64>() < self.p {
                n += 1;
            } else {
                break;
            }
        }
        n
    }
}

/// One per-step trace entry with modeled byte traffic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: u64,
    pub step: u64,
    pub phase: Phase,
    pub occupancy: usize,
    pub flushed: bool,
    pub state_slots_in_use: usize,
    pub bytes_read_modeled: u64,
    pub bytes_written_modeled: u64,
}

/// Modeled cost of one engine call, for the simulator's latency model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCost {
    pub read_bytes: u64,
    pub write_bytes: u64,
    /// Kernel launches this call maps to (decode, flush, verify passes...).
    pub kernels: u32,
}

impl StepCost {
    fn add(&mut self, ev: cost::EventCost, kernels: u32) {
        self.read_bytes += ev.read_bytes;
        self.write_bytes += ev.write_bytes;
        self.kernels += kernels;
    }

    pub fn total_bytes(&self) -> u64 {
        self.read_bytes + self.write_bytes
    }
}

struct Request {
    slot: RequestSlot,
    steps: u64,
}

fn make_record(precision: Precision, tok: &DecodeToken, u: Option<&[f64]>) -> TokenRecord {
    match tok {
        DecodeToken::Vanilla(t) => TokenRecord::Vanilla {
            k: t.k.iter().map(|&x| precision.round_kv(x)).collect(),
            v: t.v.iter().map(|&x| precision.round_kv(x)).collect(),
        },
        DecodeToken::Gdn(t) => TokenRecord::Gdn {
            alpha: t.alpha,
            k: t.k.iter().map(|&x| precision.round_kv(x)).collect(),
            u: u.expect("gdn record needs a delta value")
                .iter()
                .map(|&x| precision.round_kv(x))
                .collect(),
        },
    }
}

fn gdn_buffered(records: &[TokenRecord]) -> Result<Vec<GdnBufferedToken>> {
    records
        .iter()
        .map(|r| match r {
            TokenRecord::Gdn { alpha, k, u } => GdnBufferedToken::new(*alpha, k.clone(), u.clone()),
            TokenRecord::Vanilla { .. } => {
                Err(Error::invalid_input("expected gdn records in buffer"))
            }
        })
        .collect()
}

fn vanilla_workspace(records: &[TokenRecord], q_row: Option<(usize, &[f64])>) -> Result<ChunkWorkspace> {
    let n = records.len();
    let d = records.first().map_or(0, TokenRecord::dim);
    let mut qm = Mat::zeros(n, d);
    let mut km = Mat::zeros(n, d);
    let mut vm = Mat::zeros(n, d);
    for (i, r) in records.iter().enumerate() {
        match r {
            TokenRecord::Vanilla { k, v } => {
                km.row_mut(i).copy_from_slice(k);
                vm.row_mut(i).copy_from_slice(v);
            }
            TokenRecord::Gdn { .. } => {
                return Err(Error::invalid_input("expected vanilla records in buffer"))
            }
        }
    }
    if let Some((row, q)) = q_row {
        qm.row_mut(row).copy_from_slice(q);
    }
    ChunkWorkspace::new(qm, km, vm)
}

/// The serving engine. Owns the pool; one logical thread of control.
pub struct DecodeEngine {
    cfg: EngineConfig,
    pool: Pool,
    requests: BTreeMap<u64, Request>,
    trace_enabled: bool,
    trace: Vec<TraceRecord>,
    /// Cost of the most recent prefill/decode/verify call.
    last_cost: StepCost,
}

impl DecodeEngine {
    pub fn new(cfg: EngineConfig, pool_cfg: PoolConfig) -> Result<Self> {
        AttnConfig::new(cfg.attn.head_dim, cfg.attn.chunk_size, cfg.attn.precision)?;
        Ok(DecodeEngine {
            cfg,
            pool: Pool::new(pool_cfg),
            requests: BTreeMap::new(),
            trace_enabled: false,
            trace: Vec::new(),
            last_cost: StepCost::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut Pool {
        &mut self.pool
    }

    pub fn set_trace_enabled(&mut self, on: bool) {
        self.trace_enabled = on;
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn slot(&self, id: u64) -> Option<&RequestSlot> {
        self.requests.get(&id).map(|r| &r.slot)
    }

    pub fn request_ids(&self) -> Vec<u64> {
        self.requests.keys().copied().collect()
    }

    /// Current state of a request, if it holds one.
    pub fn state_of(&self, id: u64) -> Option<HeadState> {
        let req = self.requests.get(&id)?;
        self.pool.state(&req.slot).cloned()
    }

    /// Modeled byte/kernel cost of the most recent engine call.
    pub fn last_step_cost(&self) -> StepCost {
        self.last_cost
    }

    fn check_token(&self, tok: &DecodeToken) -> Result<()> {
        if tok.variant() != self.cfg.variant {
            return Err(Error::invalid_input(format!(
                "token variant {} does not match engine variant {}",
                tok.variant(),
                self.cfg.variant
            )));
        }
        if tok.dim() != self.cfg.head_dim() {
            return Err(Error::invalid_input(format!(
                "token dim {} does not match head dim {}",
                tok.dim(),
                self.cfg.head_dim()
            )));
        }
        Ok(())
    }

    fn d64(&self) -> u64 {
        self.cfg.head_dim() as u64
    }

    /// Fold records into `state` in chunks of the buffer size, ascending.
    fn fold_records(&self, state: &HeadState, records: &[TokenRecord]) -> Result<HeadState> {
        let m = self.cfg.buffer_size();
        let mut s = state.clone();
        for group in records.chunks(m) {
            s = self.fold_group(&s, group)?;
        }
        Ok(s)
    }

    /// Fold one group of records into the state as a single batch.
    fn fold_group(&self, state: &HeadState, records: &[TokenRecord]) -> Result<HeadState> {
        match self.cfg.variant {
            Variant::Vanilla => {
                let ws = vanilla_workspace(records, None)?;
                chunk_state_update(state, &ws)
            }
            Variant::Gdn => {
                let buffered = gdn_buffered(records)?;
                gdn::gdn_chunk_state_update(state, &buffered)
            }
        }
    }

    fn emit_trace(&mut self, req: &Request, flushed: bool) {
        if !self.trace_enabled {
            return;
        }
        self.trace.push(TraceRecord {
            request_id: req.slot.request_id,
            step: req.steps,
            phase: req.slot.phase,
            occupancy: req.slot.occupancy,
            flushed,
            state_slots_in_use: self.pool.live_state_count(),
            bytes_read_modeled: self.last_cost.read_bytes,
            bytes_written_modeled: self.last_cost.write_bytes,
        });
    }

    /// Admit a fresh request and process its prompt; returns the prompt
    /// outputs.
    ///
    /// Short prompts (`len < d`) with KV-only decoding enabled are buffered
    /// whole and served in parallel form without a state; anything else is
    /// folded into a newly allocated state in chunks of the buffer size.
    pub fn prefill(&mut self, id: u64, prompt: &[DecodeToken]) -> Result<Vec<Vec<f64>>> {
        if self.requests.contains_key(&id) {
            return Err(Error::invalid_input(format!("request {id} already exists")));
        }
        for t in prompt {
            self.check_token(t)?;
        }
        let d = self.cfg.head_dim();
        let m = self.cfg.buffer_size();
        let precision = self.cfg.attn.precision;
        let kv_only = self.cfg.kv_only_enabled && prompt.len() < d;
        let mut req = Request {
            slot: RequestSlot::new(
                id,
                if kv_only {
                    Phase::KvOnly
                } else {
                    Phase::Chunkwise
                },
            ),
            steps: 0,
        };
        self.last_cost = StepCost::default();
        let mut outputs = Vec::with_capacity(prompt.len());

        if kv_only {
            match self.cfg.variant {
                Variant::Vanilla => {
                    for tok in prompt {
                        let rec = make_record(precision, tok, None);
                        self.pool.append_token(&mut req.slot, rec)?;
                    }
                    let records = self.pool.records(&req.slot);
                    for (i, tok) in prompt.iter().enumerate() {
                        let DecodeToken::Vanilla(t) = tok else { unreachable!() };
                        let ws = vanilla_workspace(&records[..=i], Some((i, &t.q)))?;
                        let zero = HeadState::zeros(d, precision);
                        outputs.push(chunkwise_attend(&zero, &ws, i)?);
                    }
                }
                Variant::Gdn => {
                    let mut buffered: Vec<GdnBufferedToken> = Vec::new();
                    for tok in prompt {
                        let DecodeToken::Gdn(t) = tok else { unreachable!() };
                        let (rec, out) = gdn::gdn_decode_step(None, &buffered, t)?;
                        let stored = make_record(precision, tok, Some(&rec.u));
                        if let TokenRecord::Gdn { alpha, k, u } = &stored {
                            // Later tokens see the record as stored.
                            buffered.push(GdnBufferedToken::new(*alpha, k.clone(), u.clone())?);
                        }
                        self.pool.append_token(&mut req.slot, stored)?;
                        outputs.push(out);
                    }
                }
            }
            if !prompt.is_empty() {
                self.last_cost.add(
                    cost::kv_only_prefill_cost(self.cfg.variant, self.d64(), prompt.len() as u64),
                    1,
                );
            }
        } else {
            self.pool
                .alloc_state(&mut req.slot, HeadState::zeros(d, precision))?;
            let mut state = self.pool.state(&req.slot).expect("just allocated").clone();
            match self.cfg.variant {
                Variant::Vanilla => {
                    for group in prompt.chunks(m) {
                        let tokens: Vec<TokenQkv> = group
                            .iter()
                            .map(|t| match t {
                                DecodeToken::Vanilla(t) => t.clone(),
                                DecodeToken::Gdn(_) => unreachable!(),
                            })
                            .collect();
                        let ws = ChunkWorkspace::from_tokens(&tokens)?;
                        for j in 0..tokens.len() {
                            outputs.push(chunkwise_attend(&state, &ws, j)?);
                        }
                        state = chunk_state_update(&state, &ws)?;
                        self.last_cost.add(
                            cost::prefill_chunk_cost(self.cfg.variant, self.d64(), group.len() as u64),
                            1,
                        );
                    }
                }
                Variant::Gdn => {
                    for group in prompt.chunks(m) {
                        let tokens: Vec<GdnToken> = group
                            .iter()
                            .map(|t| match t {
                                DecodeToken::Gdn(t) => t.clone(),
                                DecodeToken::Vanilla(_) => unreachable!(),
                            })
                            .collect();
                        let chunk = gdn::gdn_build_chunk(&tokens, Some(&state), m)?;
                        let out = gdn::gdn_chunk_attend(&chunk, &state)?;
                        outputs.extend(out.to_row_vecs());
                        state = gdn::gdn_chunk_state_update(&state, &chunk.buffered())?;
                        self.last_cost.add(
                            cost::prefill_chunk_cost(self.cfg.variant, self.d64(), group.len() as u64),
                            1,
                        );
                    }
                }
            }
            self.pool.set_state(&req.slot, state)?;
        }

        req.slot.context_len = prompt.len();
        self.emit_trace(&req, false);
        self.requests.insert(id, req);
        Ok(outputs)
    }

    /// Decode one token: buffer it, produce its output, flush or transition
    /// as the phase dictates.
    pub fn decode_step(&mut self, id: u64, tok: &DecodeToken) -> Result<Vec<f64>> {
        self.check_token(tok)?;
        let mut req = self
            .requests
            .remove(&id)
            .ok_or_else(|| Error::invalid_input(format!("unknown request {id}")))?;
        let result = self.decode_step_inner(&mut req, tok);
        if result.is_ok() {
            req.steps += 1;
        }
        let flushed = matches!(result, Ok((_, true)));
        if result.is_ok() {
            self.emit_trace(&req, flushed);
        }
        self.requests.insert(id, req);
        result.map(|(out, _)| out)
    }

    fn decode_step_inner(
        &mut self,
        req: &mut Request,
        tok: &DecodeToken,
    ) -> Result<(Vec<f64>, bool)> {
        let d = self.cfg.head_dim();
        let m = self.cfg.buffer_size();
        let precision = self.cfg.attn.precision;
        let variant = self.cfg.variant;
        self.last_cost = StepCost::default();
        let mut flushed = false;

        let output = match req.slot.phase {
            Phase::KvOnly => {
                let out = match variant {
                    Variant::Vanilla => {
                        let rec = make_record(precision, tok, None);
                        self.pool.append_token(&mut req.slot, rec)?;
                        req.slot.context_len += 1;
                        let records = self.pool.records(&req.slot);
                        let DecodeToken::Vanilla(t) = tok else { unreachable!() };
                        let j = records.len() - 1;
                        let ws = vanilla_workspace(&records, Some((j, &t.q)))?;
                        let zero = HeadState::zeros(d, precision);
                        chunkwise_attend(&zero, &ws, j)?
                    }
                    Variant::Gdn => {
                        let records = self.pool.records(&req.slot);
                        let buffered = gdn_buffered(&records)?;
                        let DecodeToken::Gdn(t) = tok else { unreachable!() };
                        let (rec, out) = gdn::gdn_decode_step(None, &buffered, t)?;
                        let stored = make_record(precision, tok, Some(&rec.u));
                        self.pool.append_token(&mut req.slot, stored)?;
                        req.slot.context_len += 1;
                        out
                    }
                };
                debug_assert!(req.slot.occupancy <= d);
                self.last_cost.add(
                    cost::kv_only_step_cost(variant, self.d64(), req.slot.context_len as u64),
                    1,
                );
                if req.slot.context_len >= d {
                    self.transition_to_chunkwise(req)?;
                    flushed = true;
                }
                out
            }
            Phase::Chunkwise => {
                let state = self
                    .pool
                    .state(&req.slot)
                    .ok_or_else(|| Error::invalid_input("chunkwise request lost its state"))?
                    .clone();
                let out = match variant {
                    Variant::Vanilla => {
                        let rec = make_record(precision, tok, None);
                        self.pool.append_token(&mut req.slot, rec)?;
                        req.slot.context_len += 1;
                        let records = self.pool.records(&req.slot);
                        let DecodeToken::Vanilla(t) = tok else { unreachable!() };
                        let j = records.len() - 1;
                        let ws = vanilla_workspace(&records, Some((j, &t.q)))?;
                        chunkwise_attend(&state, &ws, j)?
                    }
                    Variant::Gdn => {
                        let records = self.pool.records(&req.slot);
                        let buffered = gdn_buffered(&records)?;
                        let DecodeToken::Gdn(t) = tok else { unreachable!() };
                        let (rec, out) = gdn::gdn_decode_step(Some(&state), &buffered, t)?;
                        let stored = make_record(precision, tok, Some(&rec.u));
                        self.pool.append_token(&mut req.slot, stored)?;
                        req.slot.context_len += 1;
                        out
                    }
                };
                self.last_cost.add(
                    cost::decode_step_cost(variant, self.d64(), req.slot.occupancy as u64),
                    1,
                );
                debug_assert!(req.slot.occupancy <= m);
                if req.slot.occupancy == m {
                    let records = self.pool.flush_and_free(&mut req.slot);
                    let next = self.fold_group(&state, &records)?;
                    self.pool.set_state(&req.slot, next)?;
                    self.last_cost
                        .add(cost::flush_cost(variant, self.d64(), m as u64), 1);
                    flushed = true;
                }
                out
            }
        };
        Ok((output, flushed))
    }

    /// Compress every buffered record into a newly allocated state and
    /// switch to chunkwise decoding. The state slot is claimed before the
    /// buffer is released, so an exhausted state pool leaves the request
    /// untouched.
    fn transition_to_chunkwise(&mut self, req: &mut Request) -> Result<()> {
        debug_assert_eq!(req.slot.phase, Phase::KvOnly);
        let d = self.cfg.head_dim();
        let m = self.cfg.buffer_size() as u64;
        self.pool
            .alloc_state(&mut req.slot, HeadState::zeros(d, self.cfg.attn.precision))?;
        let n = req.slot.occupancy as u64;
        let records = self.pool.flush_and_free(&mut req.slot);
        let zero = HeadState::zeros(d, self.cfg.attn.precision);
        let state = self.fold_records(&zero, &records)?;
        self.pool.set_state(&req.slot, state)?;
        if !records.is_empty() {
            // Keep one warm block for the upcoming chunkwise buffering; it
            // was freed just above, so this cannot fail.
            self.pool.alloc_blocks(&mut req.slot, 1)?;
        }
        req.slot.phase = Phase::Chunkwise;
        let mut rest = n;
        while rest > 0 {
            let take = rest.min(m);
            self.last_cost
                .add(cost::flush_cost(self.cfg.variant, self.d64(), take), 1);
            rest -= take;
        }
        Ok(())
    }

    /// Verify a batch of draft tokens; returns their outputs and records
    /// the accepted prefix length on the batch.
    ///
    /// The decode buffer is flushed into the state first so the drafts
    /// occupy a clean chunk; a KV-only request is compressed into a state
    /// (its one-way phase transition) before verification.
    pub fn verify_draft(
        &mut self,
        id: u64,
        batch: &mut DraftBatch,
        oracle: &mut dyn AcceptanceOracle,
    ) -> Result<Vec<Vec<f64>>> {
        for t in &batch.tokens {
            self.check_token(t)?;
        }
        let mut req = self
            .requests
            .remove(&id)
            .ok_or_else(|| Error::invalid_input(format!("unknown request {id}")))?;
        let result = self.verify_draft_inner(&mut req, batch, oracle);
        if let Ok((_, flushed)) = &result {
            req.steps += 1;
            let flushed = *flushed;
            self.emit_trace(&req, flushed);
        }
        self.requests.insert(id, req);
        result.map(|(outs, _)| outs)
    }

    fn verify_draft_inner(
        &mut self,
        req: &mut Request,
        batch: &mut DraftBatch,
        oracle: &mut dyn AcceptanceOracle,
    ) -> Result<(Vec<Vec<f64>>, bool)> {
        let n = batch.len();
        let precision = self.cfg.attn.precision;
        let variant = self.cfg.variant;
        self.last_cost = StepCost::default();
        if n == 0 {
            batch.accepted_len = Some(0);
            return Ok((Vec::new(), false));
        }

        // Establish the chunkwise precondition.
        let mut flushed = false;
        if req.slot.phase == Phase::KvOnly {
            self.transition_to_chunkwise(req)?;
            flushed = true;
        }
        if req.slot.occupancy > 0 {
            let occ = req.slot.occupancy as u64;
            let state = self
                .pool
                .state(&req.slot)
                .expect("chunkwise request has a state")
                .clone();
            let records = self.pool.flush_and_free(&mut req.slot);
            let next = self.fold_group(&state, &records)?;
            self.pool.set_state(&req.slot, next)?;
            self.last_cost
                .add(cost::flush_cost(variant, self.d64(), occ), 1);
            flushed = true;
        }

        let state = self
            .pool
            .state(&req.slot)
            .expect("chunkwise request has a state")
            .clone();
        let outputs: Vec<Vec<f64>>;
        let accepted: usize;

        match self.cfg.verify_mode {
            VerifyMode::KvBuffered => {
                match variant {
                    Variant::Vanilla => {
                        for tok in &batch.tokens {
                            let rec = make_record(precision, tok, None);
                            self.pool.append_token(&mut req.slot, rec)?;
                        }
                        let tokens: Vec<TokenQkv> = batch
                            .tokens
                            .iter()
                            .map(|t| match t {
                                DecodeToken::Vanilla(t) => t.clone(),
                                DecodeToken::Gdn(_) => unreachable!(),
                            })
                            .collect();
                        let ws = ChunkWorkspace::from_tokens(&tokens)?;
                        let mut outs = Vec::with_capacity(n);
                        for j in 0..n {
                            outs.push(chunkwise_attend(&state, &ws, j)?);
                        }
                        outputs = outs;
                    }
                    Variant::Gdn => {
                        let tokens: Vec<GdnToken> = batch
                            .tokens
                            .iter()
                            .map(|t| match t {
                                DecodeToken::Gdn(t) => t.clone(),
                                DecodeToken::Vanilla(_) => unreachable!(),
                            })
                            .collect();
                        let chunk = gdn::gdn_build_chunk(&tokens, Some(&state), n)?;
                        let out = gdn::gdn_chunk_attend(&chunk, &state)?;
                        for (tok, rec) in batch.tokens.iter().zip(chunk.buffered()) {
                            let stored = make_record(precision, tok, Some(&rec.u));
                            self.pool.append_token(&mut req.slot, stored)?;
                        }
                        outputs = out.to_row_vecs();
                    }
                }
                self.last_cost
                    .add(cost::verify_outputs_cost(variant, self.d64(), n as u64), 1);

                accepted = oracle.accepted_len(&outputs);
                if accepted > n {
                    // Roll the draft records back before erroring out.
                    self.pool.flush_and_free(&mut req.slot);
                    return Err(Error::invalid_input(format!(
                        "acceptance oracle returned {accepted} > {n} drafts"
                    )));
                }

                // One state update over the accepted prefix; rejected
                // records are simply discarded. Nothing accepted leaves the
                // state untouched, bit for bit.
                let records = self.pool.flush_and_free(&mut req.slot);
                if accepted > 0 {
                    let next = self.fold_group(&state, &records[..accepted])?;
                    self.pool.set_state(&req.slot, next)?;
                    self.last_cost.add(
                        cost::verify_state_update_cost(variant, self.d64(), accepted as u64),
                        1,
                    );
                }
            }
            VerifyMode::RecurrentBaseline => {
                // One temporary state slot per draft token.
                let mut temps = Vec::with_capacity(n);
                for _ in 0..n {
                    match self.pool.alloc_state_raw() {
                        Ok(t) => temps.push(t),
                        Err(e) => {
                            for t in temps.into_iter().rev() {
                                self.pool.free_state_raw(t);
                            }
                            return Err(e);
                        }
                    }
                }
                let mut outs = Vec::with_capacity(n);
                let mut cur = state;
                for (tok, &tmp) in batch.tokens.iter().zip(&temps) {
                    let (next, o) = match tok {
                        DecodeToken::Vanilla(t) => recurrent_step(&cur, t)?,
                        DecodeToken::Gdn(t) => gdn::gdn_recurrent_step(&cur, t)?,
                    };
                    self.pool.set_state_by_id(tmp, next.clone());
                    cur = next;
                    outs.push(o);
                }
                outputs = outs;

                accepted = oracle.accepted_len(&outputs);
                if accepted > n {
                    for t in temps.into_iter().rev() {
                        self.pool.free_state_raw(t);
                    }
                    return Err(Error::invalid_input(format!(
                        "acceptance oracle returned {accepted} > {n} drafts"
                    )));
                }
                // The request's state is replaced by the temporary state of
                // the last accepted draft; a swap, no extra traffic modeled.
                if accepted > 0 {
                    let chosen = self
                        .pool
                        .state_by_id(temps[accepted - 1])
                        .expect("temp state written above")
                        .clone();
                    self.pool.set_state(&req.slot, chosen)?;
                }
                for t in temps.into_iter().rev() {
                    self.pool.free_state_raw(t);
                }
                self.last_cost
                    .add(cost::recurrent_verify_cost(variant, self.d64(), n as u64), 1);
            }
        }

        req.slot.context_len += accepted;
        batch.accepted_len = Some(accepted);
        Ok((outputs, flushed))
    }

    /// Release everything a request holds.
    pub fn finish_request(&mut self, id: u64) -> Result<()> {
        let Some(mut req) = self.requests.remove(&id) else {
            return Err(Error::invalid_input(format!("unknown request {id}")));
        };
        self.pool.flush_and_free(&mut req.slot);
        if req.slot.state_slot.is_some() {
            self.pool.free_state(&mut req.slot)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equiv::{random_gdn_tokens, random_vanilla_tokens};
    use crate::math::max_abs_diff_slices;

    fn vanilla_cfg(d: usize, m: usize, verify: VerifyMode, kv_only: bool) -> EngineConfig {
        EngineConfig {
            attn: AttnConfig::new(d, m, Precision::Fp64Reference).unwrap(),
            variant: Variant::Vanilla,
            draft_len: 4,
            verify_mode: verify,
            kv_only_enabled: kv_only,
        }
    }

    fn gdn_cfg(d: usize, m: usize, verify: VerifyMode, kv_only: bool) -> EngineConfig {
        EngineConfig {
            variant: Variant::Gdn,
            ..vanilla_cfg(d, m, verify, kv_only)
        }
    }

    fn pool_cfg(d: usize, variant: Variant, blocks: usize, states: usize) -> PoolConfig {
        PoolConfig::new(
            8,
            blocks,
            states,
            cost::record_bytes(variant, d as u64),
            cost::state_bytes(d as u64),
        )
        .unwrap()
    }

    fn wrap_vanilla(tokens: &[TokenQkv]) -> Vec<DecodeToken> {
        tokens.iter().cloned().map(DecodeToken::Vanilla).collect()
    }

    fn wrap_gdn(tokens: &[GdnToken]) -> Vec<DecodeToken> {
        tokens.iter().cloned().map(DecodeToken::Gdn).collect()
    }

    /// Reference recurrent run over a token stream.
    fn vanilla_oracle(d: usize, tokens: &[TokenQkv]) -> (HeadState, Vec<Vec<f64>>) {
        let mut state = HeadState::zeros(d, Precision::Fp64Reference);
        let mut outs = Vec::new();
        for t in tokens {
            let (next, o) = recurrent_step(&state, t).unwrap();
            state = next;
            outs.push(o);
        }
        (state, outs)
    }

    fn gdn_oracle(d: usize, tokens: &[GdnToken]) -> (HeadState, Vec<Vec<f64>>) {
        let mut state = HeadState::zeros(d, Precision::Fp64Reference);
        let mut outs = Vec::new();
        for t in tokens {
            let (next, o) = gdn::gdn_recurrent_step(&state, t).unwrap();
            state = next;
            outs.push(o);
        }
        (state, outs)
    }

    #[test]
    fn chunk_of_one_equals_recurrent_decoding() {
        let d = 8;
        let tokens = random_vanilla_tokens(d, 40, 5);
        let (oracle_state, oracle_outs) = vanilla_oracle(d, &tokens);
        let cfg = vanilla_cfg(d, 1, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 8, 2)).unwrap();
        eng.prefill(0, &[]).unwrap();
        for (i, t) in tokens.iter().enumerate() {
            let out = eng
                .decode_step(0, &DecodeToken::Vanilla(t.clone()))
                .unwrap();
            assert!(max_abs_diff_slices(&out, &oracle_outs[i]) <= 1e-12);
            // Every step flushes at m = 1.
            assert_eq!(eng.slot(0).unwrap().occupancy, 0);
        }
        assert!(eng.state_of(0).unwrap().max_abs_diff(&oracle_state) <= 1e-12);
    }

    #[test]
    fn long_decode_matches_recurrent_oracle() {
        let d = 16;
        let tokens = random_vanilla_tokens(d, 200, 0);
        let (oracle_state, oracle_outs) = vanilla_oracle(d, &tokens);
        let cfg = vanilla_cfg(d, 8, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 8, 2)).unwrap();
        eng.prefill(0, &[]).unwrap();
        let mut worst: f64 = 0.0;
        for (i, t) in tokens.iter().enumerate() {
            let out = eng
                .decode_step(0, &DecodeToken::Vanilla(t.clone()))
                .unwrap();
            worst = worst.max(max_abs_diff_slices(&out, &oracle_outs[i]));
        }
        assert!(worst <= 1e-11, "max diff {worst}");
        assert!(eng.state_of(0).unwrap().max_abs_diff(&oracle_state) <= 1e-11);
    }

    #[test]
    fn prefill_boundaries() {
        let d = 8;
        // Empty prompt on the kv_only path: nothing buffered, no state.
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, true);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 2)).unwrap();
        eng.prefill(0, &[]).unwrap();
        let slot = eng.slot(0).unwrap();
        assert_eq!(slot.occupancy, 0);
        assert_eq!(slot.phase, Phase::KvOnly);
        assert!(slot.state_slot.is_none());

        // Prompt exactly d long goes chunkwise (threshold is len < d).
        let tokens = random_vanilla_tokens(d, d, 6);
        eng.prefill(1, &wrap_vanilla(&tokens)).unwrap();
        let slot = eng.slot(1).unwrap();
        assert_eq!(slot.phase, Phase::Chunkwise);
        assert!(slot.state_slot.is_some());
        assert_eq!(slot.occupancy, 0);
    }

    #[test]
    fn prefill_folds_prompt_into_state() {
        let d = 8;
        let tokens = random_vanilla_tokens(d, 40, 7);
        let (oracle_state, oracle_outs) = vanilla_oracle(d, &tokens);
        let cfg = vanilla_cfg(d, 8, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 8, 2)).unwrap();
        let outs = eng.prefill(0, &wrap_vanilla(&tokens)).unwrap();
        assert!(eng.state_of(0).unwrap().max_abs_diff(&oracle_state) <= 1e-9);
        for (o, want) in outs.iter().zip(&oracle_outs) {
            assert!(max_abs_diff_slices(o, want) <= 1e-10);
        }
    }

    #[test]
    fn gdn_prefill_and_decode_match_oracle() {
        let d = 8;
        let m = 4;
        // 20 prefill + 32 decode tokens: the run ends on a flush boundary,
        // so the engine state covers the full context.
        let tokens = random_gdn_tokens(d, 52, 11, (0.5, 1.0), (0.0, 1.0));
        let (oracle_state, oracle_outs) = gdn_oracle(d, &tokens);
        let cfg = gdn_cfg(d, m, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Gdn, 8, 2)).unwrap();
        let prefill_outs = eng.prefill(0, &wrap_gdn(&tokens[..20])).unwrap();
        for (o, want) in prefill_outs.iter().zip(&oracle_outs[..20]) {
            assert!(max_abs_diff_slices(o, want) <= 1e-9);
        }
        let mut worst: f64 = 0.0;
        for (i, t) in tokens[20..].iter().enumerate() {
            let out = eng.decode_step(0, &DecodeToken::Gdn(t.clone())).unwrap();
            worst = worst.max(max_abs_diff_slices(&out, &oracle_outs[20 + i]));
        }
        assert!(worst <= 1e-9, "max diff {worst}");
        assert_eq!(eng.slot(0).unwrap().occupancy, 0);
        assert!(eng.state_of(0).unwrap().max_abs_diff(&oracle_state) <= 1e-9);
    }

    #[test]
    fn kv_only_crossing_matches_pure_chunkwise_run() {
        let d = 16;
        let m = 8;
        let prompt_len = 10;
        let total = 40;
        let tokens = random_vanilla_tokens(d, total, 13);

        // KV-only run crosses L = d mid-decode.
        let cfg = vanilla_cfg(d, m, VerifyMode::KvBuffered, true);
        let mut kv = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 2)).unwrap();
        kv.prefill(0, &wrap_vanilla(&tokens[..prompt_len])).unwrap();
        assert_eq!(kv.slot(0).unwrap().phase, Phase::KvOnly);

        // Never-kv_only run of the same stream.
        let cfg2 = vanilla_cfg(d, m, VerifyMode::KvBuffered, false);
        let mut cw = DecodeEngine::new(cfg2, pool_cfg(d, Variant::Vanilla, 16, 2)).unwrap();
        cw.prefill(0, &wrap_vanilla(&tokens[..prompt_len])).unwrap();

        let mut transitioned = false;
        for t in &tokens[prompt_len..] {
            let a = kv.decode_step(0, &DecodeToken::Vanilla(t.clone())).unwrap();
            let b = cw.decode_step(0, &DecodeToken::Vanilla(t.clone())).unwrap();
            assert!(max_abs_diff_slices(&a, &b) <= 1e-10);
            if kv.slot(0).unwrap().phase == Phase::Chunkwise && !transitioned {
                transitioned = true;
                assert_eq!(kv.slot(0).unwrap().context_len, d);
            }
        }
        assert!(transitioned);
        // Once chunkwise, never back.
        assert_eq!(kv.slot(0).unwrap().phase, Phase::Chunkwise);
        // The two runs flush at different boundaries; verifying one final
        // accepted draft folds both partial buffers, after which the states
        // must agree.
        let extra = random_vanilla_tokens(d, 1, 99);
        for eng in [&mut kv, &mut cw] {
            let mut batch = DraftBatch::new(wrap_vanilla(&extra)).unwrap();
            eng.verify_draft(0, &mut batch, &mut FixedAcceptance(1)).unwrap();
        }
        assert!(kv.state_of(0).unwrap().max_abs_diff(&cw.state_of(0).unwrap()) <= 1e-10);
    }

    #[test]
    fn kv_only_occupancy_never_exceeds_d() {
        let d = 8;
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, true);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 2)).unwrap();
        eng.prefill(0, &[]).unwrap();
        let tokens = random_vanilla_tokens(d, 20, 17);
        for t in &tokens {
            eng.decode_step(0, &DecodeToken::Vanilla(t.clone())).unwrap();
            assert!(eng.slot(0).unwrap().occupancy <= d);
        }
    }

    #[test]
    fn verify_all_accepted_matches_recurrent() {
        for &(variant, tol) in &[(Variant::Vanilla, 1e-9), (Variant::Gdn, 1e-8)] {
            for &mode in &[VerifyMode::KvBuffered, VerifyMode::RecurrentBaseline] {
                let d = 8;
                let n = 4;
                let cfg = match variant {
                    Variant::Vanilla => vanilla_cfg(d, 4, mode, false),
                    Variant::Gdn => gdn_cfg(d, 4, mode, false),
                };
                let mut eng =
                    DecodeEngine::new(cfg, pool_cfg(d, variant, 16, 8)).unwrap();
                let (prompt, drafts): (Vec<DecodeToken>, Vec<DecodeToken>) = match variant {
                    Variant::Vanilla => {
                        let toks = random_vanilla_tokens(d, 12 + n, 19);
                        (wrap_vanilla(&toks[..12]), wrap_vanilla(&toks[12..]))
                    }
                    Variant::Gdn => {
                        let toks = random_gdn_tokens(d, 12 + n, 19, (0.5, 1.0), (0.0, 1.0));
                        (wrap_gdn(&toks[..12]), wrap_gdn(&toks[12..]))
                    }
                };
                eng.prefill(0, &prompt).unwrap();
                let mut batch = DraftBatch::new(drafts.clone()).unwrap();
                let mut oracle = FixedAcceptance(n);
                let outs = eng.verify_draft(0, &mut batch, &mut oracle).unwrap();
                assert_eq!(batch.accepted_len, Some(n));

                // Reference: recurrent decode of prompt + all drafts.
                let all: Vec<DecodeToken> =
                    prompt.iter().chain(drafts.iter()).cloned().collect();
                let (want_state, want_outs) = match variant {
                    Variant::Vanilla => {
                        let toks: Vec<TokenQkv> = all
                            .iter()
                            .map(|t| match t {
                                DecodeToken::Vanilla(t) => t.clone(),
                                _ => unreachable!(),
                            })
                            .collect();
                        vanilla_oracle(d, &toks)
                    }
                    Variant::Gdn => {
                        let toks: Vec<GdnToken> = all
                            .iter()
                            .map(|t| match t {
                                DecodeToken::Gdn(t) => t.clone(),
                                _ => unreachable!(),
                            })
                            .collect();
                        gdn_oracle(d, &toks)
                    }
                };
                for (o, want) in outs.iter().zip(&want_outs[12..]) {
                    assert!(max_abs_diff_slices(o, want) <= tol, "{variant} {mode}");
                }
                assert!(
                    eng.state_of(0).unwrap().max_abs_diff(&want_state) <= tol,
                    "{variant} {mode}"
                );
            }
        }
    }

    #[test]
    fn verify_nothing_accepted_keeps_state_bit_identical() {
        let d = 8;
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 4)).unwrap();
        let toks = random_vanilla_tokens(d, 16, 23);
        eng.prefill(0, &wrap_vanilla(&toks[..12])).unwrap();
        let before = eng.state_of(0).unwrap();
        let mut batch = DraftBatch::new(wrap_vanilla(&toks[12..])).unwrap();
        let mut oracle = FixedAcceptance(0);
        eng.verify_draft(0, &mut batch, &mut oracle).unwrap();
        let after = eng.state_of(0).unwrap();
        assert_eq!(before.as_slice(), after.as_slice());
        assert_eq!(batch.accepted_len, Some(0));
        assert_eq!(eng.slot(0).unwrap().occupancy, 0);
    }

    #[test]
    fn verify_prefix_accepted_matches_prefix_oracle() {
        let d = 8;
        let n = 4;
        let accepted = 2;
        for &mode in &[VerifyMode::KvBuffered, VerifyMode::RecurrentBaseline] {
            let cfg = vanilla_cfg(d, 4, mode, false);
            let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 8)).unwrap();
            let toks = random_vanilla_tokens(d, 12 + n, 29);
            eng.prefill(0, &wrap_vanilla(&toks[..12])).unwrap();
            let mut batch = DraftBatch::new(wrap_vanilla(&toks[12..])).unwrap();
            let mut oracle = FixedAcceptance(accepted);
            eng.verify_draft(0, &mut batch, &mut oracle).unwrap();
            let (want_state, _) = vanilla_oracle(d, &toks[..12 + accepted]);
            assert!(eng.state_of(0).unwrap().max_abs_diff(&want_state) <= 1e-9);
            assert_eq!(eng.slot(0).unwrap().context_len, 12 + accepted);
        }
    }

    #[test]
    fn verify_temp_state_accounting() {
        let d = 8;
        let n = 4;
        let toks = random_vanilla_tokens(d, 12 + n, 31);

        // kv_buffered: no extra state slots beyond the request's own.
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 8)).unwrap();
        eng.prefill(0, &wrap_vanilla(&toks[..12])).unwrap();
        eng.pool_mut().reset_peak_live_states();
        let mut batch = DraftBatch::new(wrap_vanilla(&toks[12..])).unwrap();
        eng.verify_draft(0, &mut batch, &mut FixedAcceptance(n)).unwrap();
        assert_eq!(eng.pool().peak_live_states(), 1);

        // recurrent_baseline: exactly 1 + n at the peak, freed afterwards.
        let cfg = vanilla_cfg(d, 4, VerifyMode::RecurrentBaseline, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 8)).unwrap();
        eng.prefill(0, &wrap_vanilla(&toks[..12])).unwrap();
        eng.pool_mut().reset_peak_live_states();
        let mut batch = DraftBatch::new(wrap_vanilla(&toks[12..])).unwrap();
        eng.verify_draft(0, &mut batch, &mut FixedAcceptance(n)).unwrap();
        assert_eq!(eng.pool().peak_live_states(), 1 + n);
        assert_eq!(eng.pool().live_state_count(), 1);
    }

    #[test]
    fn recurrent_baseline_needs_n_free_slots() {
        let d = 8;
        let n = 4;
        let cfg = vanilla_cfg(d, 4, VerifyMode::RecurrentBaseline, false);
        // Only 3 state slots total: 1 for the request, 2 free < n.
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 3)).unwrap();
        let toks = random_vanilla_tokens(d, 12 + n, 37);
        eng.prefill(0, &wrap_vanilla(&toks[..12])).unwrap();
        let free_before = eng.pool().free_state_count();
        let mut batch = DraftBatch::new(wrap_vanilla(&toks[12..])).unwrap();
        let err = eng.verify_draft(0, &mut batch, &mut FixedAcceptance(n));
        assert!(matches!(err, Err(Error::OutOfMemory(_))));
        assert_eq!(eng.pool().free_state_count(), free_before);
    }

    #[test]
    fn oracle_overclaim_is_rejected() {
        let d = 8;
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 4)).unwrap();
        let toks = random_vanilla_tokens(d, 14, 41);
        eng.prefill(0, &wrap_vanilla(&toks[..12])).unwrap();
        let mut batch = DraftBatch::new(wrap_vanilla(&toks[12..])).unwrap();
        let err = eng.verify_draft(0, &mut batch, &mut FixedAcceptance(99));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mixed_schedule_matches_accepted_stream_oracle() {
        // Random interleaving of decode and verify steps; the engine must
        // track the recurrent oracle over the accepted token stream.
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        for &mode in &[VerifyMode::KvBuffered, VerifyMode::RecurrentBaseline] {
            let d = 8;
            let m = 4;
            let n = 3;
            let cfg = vanilla_cfg(d, m, mode, false);
            let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 8)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(43);
            let mut accepted_stream: Vec<TokenQkv> = Vec::new();
            let mut fresh = {
                let mut ctr = 0u64;
                move || {
                    ctr += 1;
                    random_vanilla_tokens(d, 1, 1000 + ctr).remove(0)
                }
            };
            eng.prefill(0, &[]).unwrap();
            for _ in 0..60 {
                if rng.random_range(0..3) == 0 {
                    // Verification with a random accepted prefix.
                    let drafts: Vec<TokenQkv> = (0..n).map(|_| fresh()).collect();
                    let j = rng.random_range(0..=n);
                    let mut batch = DraftBatch::new(wrap_vanilla(&drafts)).unwrap();
                    eng.verify_draft(0, &mut batch, &mut FixedAcceptance(j)).unwrap();
                    accepted_stream.extend(drafts[..j].iter().cloned());
                } else {
                    let t = fresh();
                    eng.decode_step(0, &DecodeToken::Vanilla(t.clone())).unwrap();
                    accepted_stream.push(t);
                }
            }
            // Flush what remains and compare final states.
            let mut batch = DraftBatch::new(Vec::new()).unwrap();
            eng.verify_draft(0, &mut batch, &mut FixedAcceptance(0)).unwrap();
            let tail = fresh();
            // One more verify to force a flush of any partial chunk.
            let mut batch = DraftBatch::new(wrap_vanilla(&[tail.clone()])).unwrap();
            eng.verify_draft(0, &mut batch, &mut FixedAcceptance(1)).unwrap();
            accepted_stream.push(tail);
            let (want_state, _) = vanilla_oracle(d, &accepted_stream);
            assert!(
                eng.state_of(0).unwrap().max_abs_diff(&want_state) <= 1e-8,
                "{mode}"
            );
            assert_eq!(eng.slot(0).unwrap().context_len, accepted_stream.len());
        }
    }

    #[test]
    fn verify_on_kv_only_request_transitions_first() {
        let d = 8;
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, true);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 4)).unwrap();
        let toks = random_vanilla_tokens(d, 9, 47);
        eng.prefill(0, &wrap_vanilla(&toks[..5])).unwrap();
        assert_eq!(eng.slot(0).unwrap().phase, Phase::KvOnly);
        let mut batch = DraftBatch::new(wrap_vanilla(&toks[5..])).unwrap();
        eng.verify_draft(0, &mut batch, &mut FixedAcceptance(4)).unwrap();
        assert_eq!(eng.slot(0).unwrap().phase, Phase::Chunkwise);
        let (want_state, _) = vanilla_oracle(d, &toks);
        assert!(eng.state_of(0).unwrap().max_abs_diff(&want_state) <= 1e-9);
    }

    #[test]
    fn trace_records_steps_and_bytes() {
        let d = 8;
        let m = 4;
        let cfg = vanilla_cfg(d, m, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 4)).unwrap();
        eng.set_trace_enabled(true);
        eng.prefill(0, &[]).unwrap();
        let toks = random_vanilla_tokens(d, m, 53);
        for t in &toks {
            eng.decode_step(0, &DecodeToken::Vanilla(t.clone())).unwrap();
        }
        let trace = eng.take_trace();
        assert_eq!(trace.len(), 1 + m);
        // Steps 1..m-1 are plain decode steps; step m flushes.
        let dd = d as u64;
        for (i, rec) in trace[1..].iter().enumerate() {
            let j = (i + 1) as u64;
            let want = cost::decode_step_cost(Variant::Vanilla, dd, j);
            if j < m as u64 {
                assert!(!rec.flushed);
                assert_eq!(rec.bytes_read_modeled, want.read_bytes);
                assert_eq!(rec.bytes_written_modeled, want.write_bytes);
            } else {
                assert!(rec.flushed);
                let flush = cost::flush_cost(Variant::Vanilla, dd, m as u64);
                assert_eq!(rec.bytes_read_modeled, want.read_bytes + flush.read_bytes);
                assert_eq!(
                    rec.bytes_written_modeled,
                    want.write_bytes + flush.write_bytes
                );
            }
            assert_eq!(rec.state_slots_in_use, 1);
        }
        // Serialized field names are the trace schema.
        let json = serde_json::to_value(&trace[0]).unwrap();
        for key in [
            "request_id",
            "step",
            "phase",
            "occupancy",
            "flushed",
            "state_slots_in_use",
            "bytes_read_modeled",
            "bytes_written_modeled",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn finish_request_releases_everything() {
        let d = 8;
        let cfg = vanilla_cfg(d, 4, VerifyMode::KvBuffered, false);
        let mut eng = DecodeEngine::new(cfg, pool_cfg(d, Variant::Vanilla, 16, 4)).unwrap();
        let toks = random_vanilla_tokens(d, 10, 59);
        eng.prefill(0, &wrap_vanilla(&toks[..6])).unwrap();
        for t in &toks[6..] {
            eng.decode_step(0, &DecodeToken::Vanilla(t.clone())).unwrap();
        }
        eng.finish_request(0).unwrap();
        let stats = eng.pool().stats();
        assert_eq!(stats.live_blocks, 0);
        assert_eq!(stats.live_states, 0);
        assert!(eng.slot(0).is_none());
    }
}
