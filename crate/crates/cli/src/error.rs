use std::path::PathBuf;

use thiserror::Error;

/// Failures of a command, each with its documented process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] objctx::Error),

    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 config, 2 io, 3 version, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        use objctx::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Runtime(_) => 4,
            CliError::Core(e) => match e {
                E::Version { .. } => 3,
                E::Io { .. } | E::Image { .. } => 2,
                E::Format { .. } => 2,
                E::InvalidArgument(_) | E::Geometry { .. } => 1,
                E::Shape { .. } | E::Sampling(_) => 4,
            },
        }
    }
}
