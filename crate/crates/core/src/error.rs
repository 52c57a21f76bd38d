use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} ({context})")]
    Dimension {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("masking error: {0}")]
    Masking(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("sequence of length {len} does not fit in {limit} positions")]
    Truncation { len: usize, limit: usize },

    #[error("index {index} out of range (limit {limit}): {context}")]
    Range {
        index: usize,
        limit: usize,
        context: &'static str,
    },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corrupt checkpoint: tensor `{tensor}`: {message}")]
    Corruption { tensor: String, message: String },

    #[error("optimizer state does not match parameters: {0}")]
    StateCorruption(String),

    #[error("loss function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite loss at step {step}{}", diagnostic.as_ref().map(|p| format!(" (diagnostic checkpoint: {})", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: u64,
        diagnostic: Option<PathBuf>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(left: &[usize], right: &[usize], context: &'static str) -> Self {
        Error::Dimension {
            left: left.to_vec(),
            right: right.to_vec(),
            context,
        }
    }
}
