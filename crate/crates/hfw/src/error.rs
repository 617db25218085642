use std::path::{Path, PathBuf};

/// Failures of the std layer. Each kind maps to a stable process exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{0}")]
    Core(#[from] hfw_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AppError {
    /// 2 config, 3 numerical, 4 data; anything else is 1.
    pub fn exit_code(&self) -> i32 {
        use hfw_core::Error as E;
        match self {
            AppError::Config(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Data(_) | AppError::Format(_) => 4,
            AppError::Core(E::Config(_) | E::Argument(_)) => 2,
            AppError::Core(E::Numerical(_)) => 3,
            AppError::Core(E::Data(_)) => 4,
            AppError::Core(_) | AppError::Io { .. } => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
