use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("label id {0} not found")]
    LabelNotFound(u32),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure at {stage}, iteration {iteration}: {reason}")]
    Numerical {
        stage: String,
        iteration: usize,
        reason: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

impl Error {
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
}
