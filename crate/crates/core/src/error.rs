use thiserror::Error;

/// Errors raised across the engine. Variants are grouped by the subsystem
/// that produces them so the CLI can map them onto exit codes.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("no demonstrations available")]
    EmptyDemoPool,

    #[error("empty generation: no parseable examples in response")]
    EmptyGeneration,

    #[error("unlabeled sample {0}")]
    UnlabeledSample(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;
