//! IO-aware serving primitives for linear attention.
//!
//! The crate provides, for a single attention head:
//!
//! * [`linear_attn`] — vanilla linear attention in parallel, recurrent and
//!   chunkwise computation forms.
//! * [`gdn`] — the gated-delta-network variant of the same three forms,
//!   including the unit-lower-triangular chunk solve.
//! * [`buffer`] — a paged memory manager for the per-request KV buffers and
//!   the state pool.
//! * [`engine`] — a decode engine on top of the pools: chunkwise decoding
//!   with deferred batched state updates, buffered speculative verification,
//!   and KV-only decoding for short contexts.
//! * [`cost`] — exact byte accounting per computation form plus the derived
//!   speedup and capacity formulas, evaluated in rational arithmetic.
//! * [`equiv`] — randomized form-equivalence suites.
//! * [`sim`] — an analytic workload simulator (buffer sweeps, verification
//!   benchmarks, short-context crossover, serving throughput).
//!
//! Latencies anywhere in this crate are analytic-model values derived from
//! byte counts and a bandwidth/overhead model, never measurements.

pub mod buffer;
pub mod config;
pub mod cost;
pub mod engine;
pub mod equiv;
pub mod sim;
pub mod error;
pub mod gdn;
pub mod linear_attn;
pub mod math;

pub use buffer::{Phase, Pool, PoolConfig, PoolStats, RequestSlot, TokenRecord};
pub use engine::{
    AcceptanceOracle, DecodeEngine, DecodeToken, DraftBatch, EngineConfig, FixedAcceptance,
    RateAcceptance, TraceRecord, VerifyMode,
};
pub use error::{Error, Result};
pub use gdn::{GdnBufferedToken, GdnChunk, GdnToken};
pub use linear_attn::{AttnConfig, ChunkWorkspace, HeadState, Precision, TokenQkv};

use serde::{Deserialize, Serialize};

/// Which linear-attention variant a pool, engine or cost query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Gdn,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Vanilla => write!(f, "vanilla"),
            Variant::Gdn => write!(f, "gdn"),
        }
    }
}
