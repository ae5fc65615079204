//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by kernels, the pool, the engine, and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: shape mismatches, out-of-range indices or
    /// parameters, non-finite inputs.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A computation produced a non-finite intermediate.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The block pool or state pool cannot satisfy an allocation.
    #[error("out of memory: {0}")]
    OutOfMemory(String),

    /// A configuration document failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn oom(msg: impl Into<String>) -> Self {
        Error::OutOfMemory(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
