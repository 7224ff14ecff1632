use thiserror::Error;

use crate::config::ConfigErrors;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(ConfigErrors),
    /// An existing artifact was produced from different inputs.
    #[error("stale artifact {artifact}: {reason} (rerun with --force to overwrite)")]
    Stale { artifact: String, reason: String },
    #[error("missing input {0}; run the producing command first")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] zskd_core::Error),
}

impl CliError {
    /// 2 for configuration errors, 3 for provenance conflicts, 4 for
    /// numeric divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stale { .. } | CliError::Core(zskd_core::Error::Provenance(_)) => 3,
            CliError::Core(e) if e.is_divergence() => 4,
            CliError::Core(zskd_core::Error::Parameter(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
