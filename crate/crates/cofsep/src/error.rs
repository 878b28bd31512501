//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on caller-supplied data was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor/grid shapes that must agree do not.
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Filesystem or codec failure, with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents violate the documented format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Checkpoint or tensor file failed its checksum.
    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    /// Training diverged; diagnostics were dumped to the given directory.
    #[error("non-finite loss at iteration {iter}; batch dump in {dump_dir}")]
    NonFiniteLoss { iter: u64, dump_dir: PathBuf },

    /// Internal invariant broken (a bug, not a user error).
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-parsable kind tag, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Integrity { .. } => "integrity",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Internal(_) => "internal",
        }
    }
}
