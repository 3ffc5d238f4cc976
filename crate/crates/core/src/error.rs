use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the compression pipeline.
///
/// The variants map onto the process exit codes used by the command line
/// front end: validation problems, runtime/training failures and I/O or
/// on-disk format errors are kept apart so callers can react differently.
#[derive(Debug, Error)]
pub enum SaicError {
    /// Invalid or inconsistent configuration (missing paths, bad fractions, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments that violate its contract
    /// (shape mismatch, out-of-range class index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed bitstream, checkpoint or weights file.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged or a frozen network was modified.
    #[error("training error: {0}")]
    Training(String),

    /// Non-finite values showed up where finite ones are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, SaicError>;

impl SaicError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SaicError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 runtime/training, 3 I/O or format.
    pub fn exit_code(&self) -> i32 {
        match self {
            SaicError::Config(_) | SaicError::Contract(_) => 1,
            SaicError::Training(_) | SaicError::Numerical(_) => 2,
            SaicError::Format(_) | SaicError::Io { .. } | SaicError::Image { .. } => 3,
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::SaicError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
