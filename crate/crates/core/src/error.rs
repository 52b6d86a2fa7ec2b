use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GcaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GcaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("simulation diverged: |z| exceeded {guard} after {retries} rescaling retries")]
    Divergence { guard: f64, retries: usize },

    #[error("column {column} is constant (std {std:e}); cannot z-score")]
    ConstantColumn { column: usize, std: f64 },

    #[error("series too short: {len} rows, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("empty partition: {0}")]
    EmptyPartition(&'static str),

    #[error("ground truth has no positive edges")]
    NoPositives,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GcaError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        GcaError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GcaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GcaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
