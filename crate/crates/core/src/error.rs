//! Error type shared by the laboratory crates.
//!
//! Every failure is sorted into one of three buckets so that the command-line
//! frontend can map it onto a stable process exit code:
//!
//! * [`Error::Config`] — the caller asked for something malformed (bad field
//!   value, unknown template, inconsistent geometry). Exit code 2.
//! * [`Error::Io`] — the filesystem or a serialized artifact let us down.
//!   Exit code 3.
//! * [`Error::Contract`] — an internal protocol was violated (training a
//!   frozen tensor, mismatched feature norms, non-scalar loss). These indicate
//!   a bug in calling code rather than bad user input. Exit code 4.
//!
//! Errors bubbling up from the autodiff layer are re-sorted here: its
//! checkpoint/manifest failures are I/O problems, everything else (shape or
//! domain violations on the tape) means some caller broke a numerical
//! contract.

use std::path::PathBuf;

/// Failure modes for data generation, training phases, and experiments.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// User-supplied configuration is invalid. The message names the field.
    #[error("config: {0}")]
    Config(String),

    /// Reading or writing an artifact failed.
    #[error("io: {path}: {detail}")]
    Io { path: PathBuf, detail: String },

    /// An internal invariant was violated by calling code.
    #[error("contract: {0}")]
    Contract(String),
}

impl Error {
    /// Convenience constructor for configuration errors.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Convenience constructor for contract violations.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Wraps a raw I/O failure with the path it concerned.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), detail: source.to_string() }
    }

    /// Process exit code the frontend should use for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Contract(_) => 4,
        }
    }
}

impl From<caspl_autodiff::Error> for Error {
    fn from(e: caspl_autodiff::Error) -> Self {
        use caspl_autodiff::Error as Ad;
        match e {
            Ad::Io { path, source } => Error::io(path, source),
            Ad::CheckpointFormat { path, detail } => Error::Io {
                path: PathBuf::from(path),
                detail: format!("checkpoint format: {detail}"),
            },
            Ad::Manifest(e) => {
                Error::Io { path: PathBuf::from("<manifest>"), detail: e.to_string() }
            }
            other => Error::Contract(other.to_string()),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
