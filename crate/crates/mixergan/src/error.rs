use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] mixergan_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: byte {offset}: {message}")]
    Parse { path: PathBuf, offset: usize, message: String },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },

    #[error("checkpoint config hash {found} does not match the current geometry hash {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("training stopped: {source}{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Diverged { source: mixergan_core::Error, last_checkpoint: Option<PathBuf> },

    #[error("{0}")]
    Usage(String),
}

pub type AppResult<T> = Result<T, AppError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
    let path = path.into();
    move |source| AppError::Io { path, source }
}
