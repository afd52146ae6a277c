//! Error types shared across the engine.

use thiserror::Error;

/// Errors produced by validation and bookkeeping throughout the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Two aligned structures (tokens, mask, labels, matrix) disagree on length.
    #[error("length mismatch: {context}: expected {expected}, got {actual}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An index or index pair violates its documented 1-based bounds.
    #[error("index out of bounds: {context}: ({lo}, {hi}) not within 1..={n}")]
    Bounds {
        context: &'static str,
        lo: usize,
        hi: usize,
        n: usize,
    },

    /// A structural invariant of the input data does not hold.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Configuration values are inconsistent with each other.
    #[error("config error: {0}")]
    Config(String),

    /// A referenced pool entry does not exist.
    #[error("unknown pool entry id {0}")]
    UnknownEntry(u64),

    /// A desk-scale bound on the attack harness was exceeded.
    #[error("scale guard: {0}")]
    ScaleGuard(String),

    /// I/O failure while reading or writing an external artifact.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON in a config, policy, or workload file.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
