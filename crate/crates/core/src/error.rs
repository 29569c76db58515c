use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("total conflict (Con = {conflict}); combination is undefined")]
    TotalConflict { conflict: f64 },

    #[error("total conflict at combination step {step} (Con = {conflict})")]
    ConflictAtStep { step: usize, conflict: f64 },

    #[error("total conflict at snippet {snippet} (Con = {conflict})")]
    ConflictAtSnippet { snippet: usize, conflict: f64 },

    #[error("belief mass violates normalization: sum = {sum}")]
    Unnormalized { sum: f64 },

    #[error("non-finite value from {0}")]
    NonFinite(String),

    #[error("non-finite loss at iteration {iteration} (video {video})")]
    NonFiniteLoss { iteration: usize, video: String },

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure kinds for the binary feature and checkpoint containers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("shape overflows addressable size: {0:?}")]
    ShapeOverflow(Vec<u64>),
    #[error("trailing bytes after payload: {0}")]
    Trailing(u64),
    #[error("malformed entry: {0}")]
    Malformed(String),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
