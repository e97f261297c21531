use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the attribution toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data on the {side} side: need {needed}, found {found}")]
    InsufficientData {
        side: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("example {0} has no entity label and cannot be scored")]
    NotScorable(u64),

    #[error("unsupported architecture: {0}")]
    UnsupportedArch(String),

    #[error("non-finite gradient component at coordinate {0}")]
    NonFinite(usize),

    #[error("shape mismatch: expected length {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("linear solve failed: {0}; add damping (lambda > 0)")]
    Singular(String),

    #[error("training id {0} not found")]
    NotFound(u64),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid k={k} for a ranking of length {len}")]
    InvalidK { k: usize, len: usize },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
