//! Crate-wide error type. The CLI maps [`Error::Config`] and
//! [`Error::Usage`] to exit code 2 and everything else to exit code 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An op was called with tensors whose shapes cannot be combined.
    /// Always names the op and the offending dimensions.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A run configuration is structurally invalid (bad JSON, unknown key,
    /// out-of-range field, incompatible image size).
    #[error("invalid config: {0}")]
    Config(String),

    /// An API was driven incorrectly (non-scalar loss, empty bank, zero
    /// sample count).
    #[error("usage: {0}")]
    Usage(String),

    /// A checkpoint file is malformed or does not match the model.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A netpbm image file is malformed or unsupported.
    #[error("image: {0}")]
    Image(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    /// True for errors that indicate the caller's input was invalid rather
    /// than a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_))
    }
}
