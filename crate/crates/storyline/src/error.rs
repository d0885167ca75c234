//! Crate-wide error type. All fallible public APIs return [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}{}", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    /// A tensor index or token id is out of range.
    #[error("index out of range in {op}: {index} >= {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of the gradient tape (reuse, foreign tensors, non-scalar loss).
    #[error("tape error: {0}")]
    Tape(String),

    /// An input collection was empty where at least one element is required.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A binary or text artifact on disk is malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, detail: None }
    }

    pub fn non_finite_detail(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: Some(detail.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
