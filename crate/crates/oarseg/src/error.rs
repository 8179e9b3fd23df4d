use std::io;
use std::path::{Path, PathBuf};

/// Failures of the IO and command layer.
///
/// Every variant maps onto one of the process exit codes through
/// [`AppError::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: payload is truncated ({bytes} bytes is not a whole number of {elem}-byte elements)")]
    Truncated { path: PathBuf, bytes: u64, elem: usize },
    #[error("{path}: header expects {expected} elements but the payload holds {found}")]
    SizeMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] oarseg_core::Error),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

impl AppError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    pub fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        AppError::Malformed { path: path.to_path_buf(), reason: reason.into() }
    }

    /// 1 for bad invocations and configs, 2 for unusable data, 3 for
    /// failures inside a computation that was given valid inputs.
    pub fn exit_code(&self) -> i32 {
        use oarseg_core::Error as E;
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Io { .. }
            | AppError::Json { .. }
            | AppError::Csv { .. }
            | AppError::Version { .. }
            | AppError::Truncated { .. }
            | AppError::SizeMismatch { .. }
            | AppError::Malformed { .. } => EXIT_DATA,
            AppError::Runtime(_) => EXIT_RUNTIME,
            AppError::Core(e) => match e {
                E::Config(_) => EXIT_USAGE,
                E::ForeignVar | E::NonScalarLoss(_) | E::Detached | E::BackwardTwice | E::MissingGrad(_) => {
                    EXIT_RUNTIME
                }
                _ => EXIT_DATA,
            },
        }
    }
}
