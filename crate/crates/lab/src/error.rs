use std::path::PathBuf;

use zslab_core::Error as CoreError;

/// Byte-level problem in a lab file.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("at byte {offset}: {message}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

impl FormatError {
    pub fn new(offset: usize, message: impl Into<String>) -> Self {
        FormatError { offset, message: message.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: format error {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        LabError::Format { path: path.into(), source }
    }

    /// Process exit code: 2 usage/config, 3 file format, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Core(CoreError::NonFinite(_) | CoreError::NonFiniteGradient { .. }) => 4,
            LabError::Core(_) | LabError::Io { .. } | LabError::Config(_) => 2,
            LabError::Format { .. } => 3,
            LabError::Divergence(_) => 4,
        }
    }
}
