//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A precondition of an operation was violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// An id or code did not resolve against the world it belongs to.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Tensor shapes do not line up with the configured dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Inputs that cannot be combined (e.g. creatives of different products).
    #[error("input error: {0}")]
    Input(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss at {context}: {value}")]
    NonFinite { context: String, value: f64 },
    /// Training diverged past the abort threshold.
    #[error("divergence at {context}: loss {value} exceeds {limit}")]
    Divergence {
        context: String,
        value: f64,
        limit: f64,
    },
    #[error("archive format error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
