//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A configuration value violates a model or tool constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Input data is outside its documented domain (non-binary mask, out-of-range probability).
    #[error("validation error: {0}")]
    Validation(String),

    /// A serialized tensor or checkpoint is malformed; `offset` is the file byte position.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Checkpoint checksum mismatch.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Checkpoint contents do not match the expected parameter set.
    #[error("schema error: {0}")]
    Schema(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
