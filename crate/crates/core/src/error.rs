use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (record {record}): {message}")]
    Parse {
        path: PathBuf,
        record: String,
        message: String,
    },

    #[error("unresolvable image references: {}", .missing.join(", "))]
    MissingFeatures { missing: Vec<String> },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("sample {sample_id} cannot be represented: {reason}")]
    Unrepresentable { sample_id: String, reason: String },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds positional capacity {limit}")]
    CapacityExceeded { len: usize, limit: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown sample ids: {}", .0.join(", "))]
    UnknownSamples(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        step: u64,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

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
}
