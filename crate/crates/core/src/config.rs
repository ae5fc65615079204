//! One JSON configuration document for the CLI and simulator.
//!
//! The document mirrors the engine configuration, the pool sizing, the
//! workload and the latency-model constants. Unknown keys are rejected
//! everywhere.

use serde::{Deserialize, Serialize};

use crate::buffer::PoolConfig;
use crate::cost::{LatencyModel, VerifyMode};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::linear_attn::{AttnConfig, Precision};
use crate::sim::WorkloadSpec;
use crate::Variant;

/// Engine section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub head_dim: usize,
    pub chunk_size: usize,
    #[serde(default)]
    pub precision: Precision,
    pub variant: Variant,
    #[serde(default)]
    pub draft_len: usize,
    #[serde(default = "default_verify_mode")]
    pub verify_mode: VerifyMode,
    #[serde(default)]
    pub kv_only_enabled: bool,
}

fn default_verify_mode() -> VerifyMode {
    VerifyMode::KvBuffered
}

impl EngineSection {
    pub fn to_engine_config(&self) -> Result<EngineConfig> {
        Ok(EngineConfig {
            attn: AttnConfig::new(self.head_dim, self.chunk_size, self.precision)
                .map_err(|e| Error::config(e.to_string()))?,
            variant: self.variant,
            draft_len: self.draft_len,
            verify_mode: self.verify_mode,
            kv_only_enabled: self.kv_only_enabled,
        })
    }
}

/// How the pools are sized.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSizing {
    /// Counts given directly.
    Explicit {
        num_blocks: usize,
        num_state_slots: usize,
    },
    /// Blocks derived from the state-slot count: one request buffer worth
    /// per slot plus headroom.
    StateDerived {
        num_state_slots: usize,
        #[serde(default)]
        headroom: f64,
    },
    /// Both pools carved out of a byte budget. The fraction of the budget
    /// reserved for states has no sensible universal default and must be
    /// given explicitly; use 0.0 for a KV-only deployment.
    ByteBudget {
        total_bytes: u64,
        state_fraction: f64,
    },
}

/// Pool section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    pub block_size: usize,
    pub sizing: PoolSizing,
}

impl PoolSection {
    pub fn to_pool_config(&self, engine: &EngineSection) -> Result<PoolConfig> {
        let d = engine.head_dim;
        let variant = engine.variant;
        let record = PoolConfig::record_bytes(d, variant);
        let state = PoolConfig::state_bytes(d);
        match self.sizing {
            PoolSizing::Explicit {
                num_blocks,
                num_state_slots,
            } => PoolConfig::new(self.block_size, num_blocks, num_state_slots, record, state),
            PoolSizing::StateDerived {
                num_state_slots,
                headroom,
            } => {
                // Per-request peak buffering: the chunk, a draft batch, or a
                // whole short context, whichever is largest.
                let mut buffer_tokens = engine.chunk_size.max(engine.draft_len);
                if engine.kv_only_enabled {
                    buffer_tokens = buffer_tokens.max(d);
                }
                PoolConfig::with_state_pool(
                    d,
                    variant,
                    self.block_size,
                    num_state_slots,
                    buffer_tokens,
                    headroom,
                )
            }
            PoolSizing::ByteBudget {
                total_bytes,
                state_fraction,
            } => {
                if !(state_fraction.is_finite() && (0.0..=1.0).contains(&state_fraction)) {
                    return Err(Error::config("state_fraction must lie in [0, 1]"));
                }
                let state_budget = (total_bytes as f64 * state_fraction) as u64;
                let block_budget = total_bytes - state_budget;
                let num_state_slots = (state_budget / state) as usize;
                let num_blocks = (block_budget / (self.block_size as u64 * record)) as usize;
                PoolConfig::new(
                    self.block_size,
                    num_blocks,
                    num_state_slots,
                    record,
                    state,
                )
            }
        }
    }
}

/// The whole document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub engine: EngineSection,
    pub pool: PoolSection,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub latency: LatencyModel,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        self.engine.to_engine_config()
    }

    pub fn pool_config(&self) -> Result<PoolConfig> {
        self.pool.to_pool_config(&self.engine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> &'static str {
        r#"{
            "engine": {
                "head_dim": 16,
                "chunk_size": 8,
                "variant": "vanilla",
                "draft_len": 4,
                "verify_mode": "kv_buffered",
                "kv_only_enabled": false
            },
            "pool": {
                "block_size": 8,
                "sizing": {"kind": "explicit", "num_blocks": 32, "num_state_slots": 8}
            },
            "workload": {
                "arrival": {"kind": "closed", "batch_size": 8, "num_requests": 16},
                "prompt_len": {"kind": "fixed", "n": 10},
                "decode_len": {"kind": "uniform", "min": 5, "max": 20},
                "acceptance_rate": 0.8,
                "seed": 42
            },
            "latency": {"bandwidth_bytes_per_s": 8.64e11, "kernel_overhead_s": 5e-6}
        }"#
    }

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::from_json(sample()).unwrap();
        let engine = cfg.engine_config().unwrap();
        assert_eq!(engine.head_dim(), 16);
        assert_eq!(engine.draft_len, 4);
        let pool = cfg.pool_config().unwrap();
        assert_eq!(pool.num_blocks, 32);
        assert_eq!(pool.bytes_per_token_record, 64);
        assert_eq!(pool.bytes_per_state, 1024);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = sample().replace("\"seed\": 42", "\"seed\": 42, \"bogus\": 1");
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn byte_budget_sizing() {
        let mut cfg = RunConfig::from_json(sample()).unwrap();
        cfg.pool.sizing = PoolSizing::ByteBudget {
            total_bytes: 1 << 20,
            state_fraction: 0.5,
        };
        let pool = cfg.pool_config().unwrap();
        // d = 16: state 1024 B, record 64 B, block 8 tokens.
        assert_eq!(pool.num_state_slots, (1 << 19) / 1024);
        assert_eq!(pool.num_blocks, (1 << 19) / (8 * 64));
        cfg.pool.sizing = PoolSizing::ByteBudget {
            total_bytes: 1 << 20,
            state_fraction: 1.5,
        };
        assert!(cfg.pool_config().is_err());
    }

    #[test]
    fn state_derived_sizing_counts_buffers() {
        let mut cfg = RunConfig::from_json(sample()).unwrap();
        cfg.pool.sizing = PoolSizing::StateDerived {
            num_state_slots: 10,
            headroom: 0.5,
        };
        let pool = cfg.pool_config().unwrap();
        // chunk 8 >= draft 4, block 8 -> 1 block per request, x1.5 headroom.
        assert_eq!(pool.num_blocks, 15);
        assert_eq!(pool.num_state_slots, 10);
    }
}
