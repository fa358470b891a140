//! Crate-wide error types.

use thiserror::Error;

/// Errors raised by tensor and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("non-finite value produced by {op} ({context})")]
    NonFinite { op: &'static str, context: String },

    #[error("degenerate weight: {0}")]
    DegenerateWeight(String),
}

/// Errors raised while building or consuming datasets, splits and annotations.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("scene spec error: {0}")]
    Spec(String),

    #[error("infeasible split: cannot cover {label} with holdout {holdout}")]
    InfeasibleSplit { label: String, holdout: f64 },

    #[error("unknown label '{0}' (not in vocabulary)")]
    UnknownLabel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-level error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
