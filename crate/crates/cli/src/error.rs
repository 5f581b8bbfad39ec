use brainsbi_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 configuration, 3 dependency or hash, 4 numeric failure, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) | CliError::Stale(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Domain { .. } => 2,
                CoreError::Artifact { .. } => 3,
                CoreError::Numeric(_) | CoreError::Divergence { .. } | CoreError::Solver { .. } => 4,
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}
