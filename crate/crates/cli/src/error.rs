use thiserror::Error;

use crate::config::ConfigError;

/// Exit code 2 for configuration problems, 1 for everything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] hessreg::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Core(hessreg::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
