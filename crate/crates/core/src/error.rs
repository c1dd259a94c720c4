//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DicsError {
    /// A feature vector with (near-)zero norm where a direction is required.
    #[error("degenerate feature")]
    DegenerateFeature,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid probability vector: {0}")]
    InvalidProbability(&'static str),

    /// The memory queue holds no entries yet.
    #[error("queue not warmed up")]
    QueueNotWarmedUp,

    #[error("batch of {batch} exceeds queue capacity {capacity}")]
    BatchExceedsCapacity { batch: usize, capacity: usize },

    #[error("missing prototype for domain {0}")]
    MissingPrototype(usize),

    #[error("encoder architecture mismatch")]
    ArchitectureMismatch,

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DicsError>;
