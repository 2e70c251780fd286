//! Error type shared by the tape, optimizer and checkpoint modules.

use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named op.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument is outside the documented domain of the op
    /// (non-positive temperature, slice out of bounds, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller-facing contract was violated (non-scalar loss, repeated
    /// backward, optimizer id mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint bytes do not follow the on-disk format.
    #[error("checkpoint format error in {path}: {detail}")]
    CheckpointFormat { path: String, detail: String },

    /// Manifest JSON could not be read or written.
    #[error("checkpoint manifest error: {0}")]
    Manifest(#[from] serde_json::Error),

    /// Underlying file I/O failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
