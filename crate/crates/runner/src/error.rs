use std::io;
use std::path::PathBuf;

use permsort_core::Error as CoreError;

pub type Result<T, E = RunnerError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl RunnerError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data or version, 3 divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunnerError::Usage(_) => 1,
            RunnerError::Divergence(_) => 3,
            RunnerError::Core(CoreError::Divergence(_)) => 3,
            RunnerError::Core(CoreError::Config(_) | CoreError::InvalidPermutation(_)) => 1,
            RunnerError::Data(_) | RunnerError::Io { .. } | RunnerError::Core(_) => 2,
        }
    }
}
