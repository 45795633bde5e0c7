//! Error taxonomy shared by every module in the crate.
//!
//! Anything user-correctable (bad flags, malformed files, incompatible
//! shapes) is a distinct variant so the CLI can map it to a usage exit code,
//! while numeric blow-ups (NaN/Inf mid-training) stay separable because they
//! indicate a different failure class.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is out of its documented domain (e.g. log of a
    /// non-positive value, dropout probability outside [0, 1)).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or two configuration sources
    /// contradict each other.
    #[error("config error: {0}")]
    Config(String),

    /// Input data could not be parsed; the message names the offending
    /// location (file, line, column) where known.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A stored artifact (checkpoint manifest/blob) is inconsistent.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    /// A non-finite value (NaN or Inf) appeared where finiteness is an
    /// invariant. The message names the operation or training step.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numeric kind (NaN/Inf mid-computation),
    /// which callers may want to distinguish from bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
