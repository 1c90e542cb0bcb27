use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrmError>;

#[derive(Debug, Error)]
pub enum DrmError {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("metadata mismatch for {path}: sidecar has {found} entries, payload has {expected}")]
    MetadataMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("insufficient data for attribute `{attribute}`: {available} records, need more than {required}")]
    InsufficientData {
        attribute: String,
        available: usize,
        required: usize,
    },

    #[error("correlation undefined between `{first}` and `{second}`: zero-variance weight vector")]
    UndefinedCorrelation { first: String, second: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl DrmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(DrmError::Validation(msg()))
    }
}
