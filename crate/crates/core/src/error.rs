use std::io;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("empty chunk: mean pooling needs at least one token")]
    EmptyChunk,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("state belongs to sequence {expected}, got {got}")]
    StateMismatch { expected: u64, got: u64 },

    #[error("refusing quadratic allocation: n = {n} exceeds guard {guard} ({floats} score floats)")]
    Guard { n: usize, guard: usize, floats: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by NaN/Inf or divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
