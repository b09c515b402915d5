use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value while evaluating {context}")]
    NonFinite { context: String },

    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("policy and reference models have different configs")]
    ConfigMismatch,

    #[error("answer length mismatch: policy summary has {policy}, reference has {reference}")]
    AnswerLengthMismatch { policy: usize, reference: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("objective {objective} requires a {expected} corpus, got {found}")]
    SchemaMismatch {
        objective: &'static str,
        expected: &'static str,
        found: &'static str,
    },

    #[error("non-finite loss at step {step} (batch record indices {indices:?}): {detail}")]
    NonFiniteLoss {
        step: usize,
        indices: Vec<usize>,
        detail: String,
    },

    #[error("step {step} out of range for {total} total steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
