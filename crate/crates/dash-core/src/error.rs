//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/model shapes. Carries both shapes so the
    /// message is actionable without a debugger.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A hyperparameter or argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A label or index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An operation was called on an object in the wrong state
    /// (stale cache, empty ensemble, ...).
    #[error("state error: {0}")]
    State(String),

    /// The configuration is structurally valid but not supported
    /// (e.g. diversity loss with a single class).
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// A NaN or infinity surfaced where a finite value is required.
    /// Never silent: the message names where it happened.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed input data; names the offending row/column.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
