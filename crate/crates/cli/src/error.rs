use std::path::PathBuf;

use thiserror::Error;

/// Failure of a pipeline stage, grouped by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: missing input {}", path.display())]
    MissingInput { stage: &'static str, path: PathBuf },

    #[error("{stage}: incompatible inputs: {reason}")]
    Mismatch { stage: &'static str, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] qpnet_core::Error),
}

impl CliError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput { .. } => 3,
            Self::Mismatch { .. } => 4,
            Self::Core(qpnet_core::Error::Format { .. }) => 4,
            Self::Io { .. } | Self::Core(qpnet_core::Error::Io(_)) => 6,
            Self::Core(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn mismatch(stage: &'static str, reason: impl Into<String>) -> Self {
        Self::Mismatch {
            stage,
            reason: reason.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
