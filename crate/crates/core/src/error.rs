//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or precondition check failed before any work started.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// A vector or matrix had the wrong size for the operation.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// `step` was called after the episode terminated.
    #[error("step called after episode termination")]
    EpisodeOver,

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(String),

    /// A training loop diverged past its abort threshold.
    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    /// A serialized artifact could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
