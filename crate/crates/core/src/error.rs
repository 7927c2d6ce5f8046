//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: loss does not depend on any differentiable leaf")]
    DetachedGraph,

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("parameter/gradient key mismatch: {0}")]
    KeyMismatch(String),

    #[error("Cholesky factorization failed (condition estimate {condition:.3e})")]
    Cholesky { condition: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: config errors are 2, numeric failures 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) | Error::KeyMismatch(_) => 2,
            Error::NonFinite { .. } | Error::Cholesky { .. } | Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
