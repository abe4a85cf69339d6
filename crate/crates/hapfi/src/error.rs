use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HapfiError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] hapfi_core::Error),
}

impl HapfiError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HapfiError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HapfiError::Usage(_) | HapfiError::Core(hapfi_core::Error::Config(_)) => 1,
            HapfiError::Core(hapfi_core::Error::Numeric(_) | hapfi_core::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = HapfiError> = std::result::Result<T, E>;
