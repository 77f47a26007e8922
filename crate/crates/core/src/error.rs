use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed payload {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {context} at row {row}, column {col}")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("degenerate attribute distribution: {0}")]
    DegenerateAttribute(String),

    #[error("untunable neuron: responses have zero variance")]
    UntunableNeuron,

    #[error("failed to decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
