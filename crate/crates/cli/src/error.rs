use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage} artifact missing: {} (run `cograph {stage}` first)", path.display())]
    Missing { stage: &'static str, path: PathBuf },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cograph::Error),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for problems detectable before doing any work (bad config, missing
    /// inputs, invalid data), 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        use cograph::Error as E;
        match self {
            CliError::Missing { .. } | CliError::Config(_) => 2,
            CliError::Core(E::Validation(_) | E::Config(_) | E::Dimension(_)) => 2,
            CliError::Core(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
