//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("degenerate bone {parent}->{child}: zero length in frame {frame}")]
    DegenerateBone {
        parent: usize,
        child: usize,
        frame: usize,
    },

    #[error("sequence too short: need at least {min} frames, got {actual}")]
    TooShort { min: usize, actual: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("build error: {0}")]
    Build(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// runtime or numerical failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Diverged(_) | Error::Io(_))
    }
}
