use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or a bank/config mismatch.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] superad::Error),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(superad::Error::InvalidArgument(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
