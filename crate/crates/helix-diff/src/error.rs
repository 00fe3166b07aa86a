//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called outside its contract (bad timestep, missing input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a documented invariant (non-binary mask, empty prompt, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A PPM/PGM stream is malformed; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A checkpoint failed its magic or checksum validation.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
