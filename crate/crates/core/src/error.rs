//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, model construction, training and
/// adaptation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid label distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("label stratum `{label}` holds {available} instances but {requested} were requested")]
    InsufficientStratum {
        label: String,
        available: usize,
        requested: usize,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
