use std::path::PathBuf;

use gelina_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing {what} at {}; run `gelina {command}` first", path.display())]
    MissingStage {
        what: &'static str,
        command: &'static str,
        path: PathBuf,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav output: {0}")]
    Wav(#[from] hound::Error),
}

impl From<gelina_tensor::CheckpointError> for PipelineError {
    fn from(e: gelina_tensor::CheckpointError) -> Self {
        Self::Core(e.into())
    }
}

impl PipelineError {
    /// Process exit status: 1 usage, 2 missing dependency, 3 data error,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(CoreError::Config(_)) => 1,
            Self::MissingStage { .. } => 2,
            Self::Core(CoreError::NonFiniteLoss(_) | CoreError::NonFiniteState { .. }) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
