use std::path::PathBuf;

use graphjigsaw_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(CoreError),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    /// Process exit status: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) | AppError::Io { .. } | AppError::Checkpoint(_) => 3,
            AppError::Numeric(_) => 4,
            AppError::Core(e) => match e {
                CoreError::NonFinite(_) => 4,
                CoreError::Config(_)
                | CoreError::StageOutOfRange { .. }
                | CoreError::GridTooSmall(_)
                | CoreError::GridTooLarge { .. } => 2,
                CoreError::MissingParameter(_) | CoreError::Protocol(_) => 3,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(m) => AppError::Numeric(m),
            other => AppError::Core(other),
        }
    }
}
