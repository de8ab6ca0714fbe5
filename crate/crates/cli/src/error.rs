use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("ablation findings failed:\n{0}")]
    Findings(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("training diverged at step {0}")]
    Diverged(u64),
    #[error("run directory {0} is locked by another process")]
    Locked(String),
    #[error(transparent)]
    Core(#[from] modalfuse::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// 0 success, 2 config, 3 checkpoint, 4 failed findings, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(modalfuse::Error::Config(_)) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Findings(_) => 4,
            _ => 1,
        }
    }
}
