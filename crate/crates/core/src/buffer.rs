//! Paged memory manager for KV buffers and linear-attention states.
//!
//! Two pools back every request:
//!
//! * a block pool for buffered per-token records (key/value for vanilla
//!   attention, decay/key/delta-value for GDN), allocated in fixed-size
//!   blocks so per-request buffers can grow and shrink without
//!   fragmentation;
//! * a state pool of `d x d` attention states, one slot per request (plus
//!   temporaries during recurrent-baseline verification).
//!
//! Free lists are LIFO over ascending initial order: a fresh pool hands out
//! ids `0, 1, 2, ...` and the most recently freed id is reused first, so a
//! replayed operation sequence always reproduces the same assignments.
//! Allocation is all-or-nothing; a failed call leaves both the pool and the
//! request slot untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_attn::HeadState;
use crate::Variant;

/// Tokens-per-block and pool sizing, plus the modeled storage widths used
/// for byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Tokens per block; typically 8 or 16, or the buffer/draft size so one
    /// request's buffer fits a single block.
    pub block_size: usize,
    pub num_blocks: usize,
    pub num_state_slots: usize,
    /// Modeled bytes per buffered token record (f16 k/v, plus the decay
    /// scalar for GDN).
    pub bytes_per_token_record: u64,
    /// Modeled bytes per state (f32 entries).
    pub bytes_per_state: u64,
}

impl PoolConfig {
    pub fn new(
        block_size: usize,
        num_blocks: usize,
        num_state_slots: usize,
        bytes_per_token_record: u64,
        bytes_per_state: u64,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("block_size must be >= 1"));
        }
        Ok(PoolConfig {
            block_size,
            num_blocks,
            num_state_slots,
            bytes_per_token_record,
            bytes_per_state,
        })
    }

    /// Modeled bytes of one buffered token record.
    pub fn record_bytes(head_dim: usize, variant: Variant) -> u64 {
        crate::cost::record_bytes(variant, head_dim as u64)
    }

    /// Modeled bytes of one state.
    pub fn state_bytes(head_dim: usize) -> u64 {
        crate::cost::state_bytes(head_dim as u64)
    }

    /// Size the block pool from the state pool: one request buffer worth of
    /// blocks per state slot, padded by `headroom` (a fraction, e.g. 0.25).
    pub fn with_state_pool(
        head_dim: usize,
        variant: Variant,
        block_size: usize,
        num_state_slots: usize,
        buffer_tokens_per_request: usize,
        headroom: f64,
    ) -> Result<Self> {
        if !(headroom.is_finite() && headroom >= 0.0) {
            return Err(Error::config("headroom must be a non-negative fraction"));
        }
        if block_size == 0 {
            return Err(Error::config("block_size must be >= 1"));
        }
        let blocks_per_request = buffer_tokens_per_request.div_ceil(block_size).max(1);
        let base = num_state_slots * blocks_per_request;
        let num_blocks = ((base as f64) * (1.0 + headroom)).ceil() as usize;
        PoolConfig::new(
            block_size,
            num_blocks,
            num_state_slots,
            Self::record_bytes(head_dim, variant),
            Self::state_bytes(head_dim),
        )
    }

    /// Size a KV-only pool straight from a byte budget:
    /// `num_blocks = floor(budget / (block_size * record_bytes))`, no states.
    pub fn kv_only_from_budget(
        head_dim: usize,
        variant: Variant,
        block_size: usize,
        byte_budget: u64,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("block_size must be >= 1"));
        }
        let rec = Self::record_bytes(head_dim, variant);
        let num_blocks = (byte_budget / (block_size as u64 * rec)) as usize;
        PoolConfig::new(block_size, num_blocks, 0, rec, Self::state_bytes(head_dim))
    }
}

/// One buffered token record.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenRecord {
    Vanilla { k: Vec<f64>, v: Vec<f64> },
    Gdn { alpha: f64, k: Vec<f64>, u: Vec<f64> },
}

impl TokenRecord {
    pub fn variant(&self) -> Variant {
        match self {
            TokenRecord::Vanilla { .. } => Variant::Vanilla,
            TokenRecord::Gdn { .. } => Variant::Gdn,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TokenRecord::Vanilla { k, .. } | TokenRecord::Gdn { k, .. } => k.len(),
        }
    }
}

/// Serving phase of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Short context: all records buffered, no state exists.
    KvOnly,
    /// A state exists; the buffer holds the current partial chunk.
    Chunkwise,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::KvOnly => write!(f, "kv_only"),
            Phase::Chunkwise => write!(f, "chunkwise"),
        }
    }
}

/// Per-request serving handle: state slot, block list, occupancy, phase.
#[derive(Debug, Clone)]
pub struct RequestSlot {
    pub request_id: u64,
    pub state_slot: Option<usize>,
    /// Physical block ids in logical order.
    pub blocks: Vec<usize>,
    /// Records currently buffered.
    pub occupancy: usize,
    /// Total tokens processed for this request.
    pub context_len: usize,
    pub phase: Phase,
}

impl RequestSlot {
    pub fn new(request_id: u64, phase: Phase) -> Self {
        RequestSlot {
            request_id,
            state_slot: None,
            blocks: Vec::new(),
            occupancy: 0,
            context_len: 0,
            phase,
        }
    }

    /// Buffered-token capacity of the blocks currently held.
    pub fn capacity(&self, block_size: usize) -> usize {
        self.blocks.len() * block_size
    }
}

/// Pool statistics snapshot for the simulator and CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub free_blocks: usize,
    pub live_blocks: usize,
    pub free_states: usize,
    pub live_states: usize,
    pub bytes_in_use: u64,
}

/// The shared pools. One engine owns a pool exclusively; every operation
/// takes `&mut self` (single-writer contract) and snapshot reads copy.
#[derive(Debug)]
pub struct Pool {
    cfg: PoolConfig,
    /// Stack of free block ids; pop yields the lowest unused id first on a
    /// fresh pool and the most recently freed id thereafter.
    free_blocks: Vec<usize>,
    free_states: Vec<usize>,
    block_store: Vec<Vec<TokenRecord>>,
    state_store: Vec<Option<HeadState>>,
    /// High-water mark of simultaneously live states, for verification
    /// memory-bound checks.
    peak_live_states: usize,
}

impl Pool {
    /// All blocks and state slots free; free lists ordered so ids are
    /// handed out ascending.
    pub fn new(cfg: PoolConfig) -> Self {
        Pool {
            cfg,
            free_blocks: (0..cfg.num_blocks).rev().collect(),
            free_states: (0..cfg.num_state_slots).rev().collect(),
            block_store: (0..cfg.num_blocks).map(|_| Vec::new()).collect(),
            state_store: (0..cfg.num_state_slots).map(|_| None).collect(),
            peak_live_states: 0,
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    pub fn free_block_count(&self) -> usize {
        self.free_blocks.len()
    }

    pub fn free_state_count(&self) -> usize {
        self.free_states.len()
    }

    pub fn live_state_count(&self) -> usize {
        self.cfg.num_state_slots - self.free_states.len()
    }

    /// High-water mark of live states since the last reset.
    pub fn peak_live_states(&self) -> usize {
        self.peak_live_states
    }

    pub fn reset_peak_live_states(&mut self) {
        self.peak_live_states = self.live_state_count();
    }

    /// Grow `slot` so it can hold `tokens_needed` more records.
    ///
    /// All-or-nothing: on out-of-memory neither the pool nor the slot
    /// changes.
    pub fn alloc_blocks(&mut self, slot: &mut RequestSlot, tokens_needed: usize) -> Result<()> {
        let free_capacity = slot.capacity(self.cfg.block_size) - slot.occupancy;
        let missing = tokens_needed.saturating_sub(free_capacity);
        let new_blocks = missing.div_ceil(self.cfg.block_size);
        if new_blocks == 0 {
            return Ok(());
        }
        if self.free_blocks.len() < new_blocks {
            return Err(Error::oom(format!(
                "need {new_blocks} blocks, {} free",
                self.free_blocks.len()
            )));
        }
        for _ in 0..new_blocks {
            let id = self.free_blocks.pop().expect("checked above");
            debug_assert!(self.block_store[id].is_empty());
            slot.blocks.push(id);
        }
        Ok(())
    }

    /// Append one record to the slot's buffer, allocating a block if the
    /// current ones are full.
    pub fn append_token(&mut self, slot: &mut RequestSlot, record: TokenRecord) -> Result<()> {
        self.alloc_blocks(slot, 1)?;
        let logical = slot.occupancy / self.cfg.block_size;
        let offset = slot.occupancy % self.cfg.block_size;
        let physical = slot.blocks[logical];
        debug_assert_eq!(self.block_store[physical].len(), offset);
        self.block_store[physical].push(record);
        slot.occupancy += 1;
        Ok(())
    }

    /// Copy-on-read snapshot of the buffered records in append order.
    pub fn records(&self, slot: &RequestSlot) -> Vec<TokenRecord> {
        let mut out = Vec::with_capacity(slot.occupancy);
        for &b in &slot.blocks {
            out.extend(self.block_store[b].iter().cloned());
        }
        debug_assert_eq!(out.len(), slot.occupancy);
        out
    }

    /// Drain the buffer: return all records in append order, reset
    /// occupancy, give every block back to the free list.
    pub fn flush_and_free(&mut self, slot: &mut RequestSlot) -> Vec<TokenRecord> {
        let mut out = Vec::with_capacity(slot.occupancy);
        for &b in &slot.blocks {
            out.append(&mut self.block_store[b]);
            self.free_blocks.push(b);
        }
        slot.blocks.clear();
        slot.occupancy = 0;
        out
    }

    /// Give one state slot to the request, holding `initial`.
    pub fn alloc_state(&mut self, slot: &mut RequestSlot, initial: HeadState) -> Result<()> {
        if slot.state_slot.is_some() {
            return Err(Error::invalid_input(format!(
                "request {} already holds a state slot",
                slot.request_id
            )));
        }
        let id = self.alloc_state_raw()?;
        self.state_store[id] = Some(initial);
        slot.state_slot = Some(id);
        Ok(())
    }

    /// Release the request's state slot.
    pub fn free_state(&mut self, slot: &mut RequestSlot) -> Result<()> {
        let id = slot
            .state_slot
            .take()
            .ok_or_else(|| Error::invalid_input("request holds no state slot"))?;
        self.free_state_raw(id);
        Ok(())
    }

    /// Allocate a bare state slot (used for verification temporaries).
    pub fn alloc_state_raw(&mut self) -> Result<usize> {
        let id = self
            .free_states
            .pop()
            .ok_or_else(|| Error::oom("state pool exhausted"))?;
        self.peak_live_states = self.peak_live_states.max(self.live_state_count());
        Ok(id)
    }

    /// Release a bare state slot.
    pub fn free_state_raw(&mut self, id: usize) {
        debug_assert!(!self.free_states.contains(&id), "double free of state {id}");
        self.state_store[id] = None;
        self.free_states.push(id);
    }

    pub fn state(&self, slot: &RequestSlot) -> Option<&HeadState> {
        slot.state_slot.and_then(|id| self.state_store[id].as_ref())
    }

    pub fn state_by_id(&self, id: usize) -> Option<&HeadState> {
        self.state_store[id].as_ref()
    }

    pub fn set_state_by_id(&mut self, id: usize, state: HeadState) {
        self.state_store[id] = Some(state);
    }

    pub fn set_state(&mut self, slot: &RequestSlot, state: HeadState) -> Result<()> {
        let id = slot
            .state_slot
            .ok_or_else(|| Error::invalid_input("request holds no state slot"))?;
        self.state_store[id] = Some(state);
        Ok(())
    }

    /// Snapshot of the pool counters.
    pub fn stats(&self) -> PoolStats {
        let live_blocks = self.cfg.num_blocks - self.free_blocks.len();
        let live_states = self.live_state_count();
        PoolStats {
            free_blocks: self.free_blocks.len(),
            live_blocks,
            free_states: self.free_states.len(),
            live_states,
            bytes_in_use: live_blocks as u64
                * self.cfg.block_size as u64
                * self.cfg.bytes_per_token_record
                + live_states as u64 * self.cfg.bytes_per_state,
        }
    }
}
