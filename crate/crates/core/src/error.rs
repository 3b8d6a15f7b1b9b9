use std::path::PathBuf;

/// Errors surfaced by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("class {class} has {got} images, need at least {needed}")]
    InsufficientClassData { class: usize, needed: usize, got: usize },

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad magic in {path:?}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("config hash mismatch: file has {found:016x}, expected {expected:016x}")]
    ConfigHash { found: u64, expected: u64 },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable numeric code, used by the CLI as a process exit status.
    pub fn code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Config(_) => 3,
            Error::InsufficientData { .. } => 4,
            Error::InsufficientClassData { .. } => 5,
            Error::NonFinite { .. } => 6,
            Error::Numerical(_) => 7,
            Error::BadMagic { .. } => 10,
            Error::BadVersion { .. } => 11,
            Error::Truncated(_) => 12,
            Error::ConfigHash { .. } => 13,
            Error::Io { .. } => 20,
            Error::Json(_) => 21,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
