//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no feasible codec: {0}")]
    NoFeasibleCodec(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("source model diverged: {0}")]
    ModelDiverged(String),

    #[error("no quality overlap between curves: {0}")]
    NoOverlap(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }
}
