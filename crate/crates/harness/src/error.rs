use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] winmatch_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid argument: {0}")]
    Args(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status: 2 bad arguments, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use winmatch_core::Error as E;
        match self {
            Self::Io { .. } | Self::Format { .. } => 4,
            Self::Numerical(_) | Self::Core(E::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
