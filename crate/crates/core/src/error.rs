//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation. Carries both shapes.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structurally invalid configuration (even kernel size, C' >= C, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Math domain violation (log of a non-positive value, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// API contract violation (backward on a non-scalar, epoch out of range, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid state transition (double backward without reset, ...).
    #[error("state error: {0}")]
    State(String),

    /// An operation produced NaN/Inf from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Malformed input file.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// File contents inconsistent with their own metadata.
    #[error("integrity error in {path}: {message}")]
    Integrity { path: String, message: String },

    /// Dataset cannot satisfy the request (not enough pixels of a class, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Loss undefined for the given batch (no unchanged samples, ...).
    #[error("loss error: {0}")]
    Loss(String),

    /// Trained parameters incompatible with the given scene.
    #[error("compatibility error: {0}")]
    Compat(String),

    /// Thresholding impossible (constant magnitude image).
    #[error("threshold error: {0}")]
    Threshold(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
