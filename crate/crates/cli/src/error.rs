use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] imbseg::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration and usage problems, 3 for missing or unreadable
    /// artifacts, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use imbseg::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) | CliError::Csv(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Geometry(_)
                | E::ShapeMismatch { .. }
                | E::BoxOutOfRange(_)
                | E::NotBinary { .. }
                | E::EmptyRegion
                | E::NoNonzero => 2,
                E::Numerical(_) | E::NaN(_) | E::Generation(_) => 4,
                _ => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Fail with exit code 3 naming `path` unless it exists.
pub fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.display().to_string()))
    }
}
