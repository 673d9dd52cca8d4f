use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library. The CLI maps each variant family onto a
/// distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition (shape, range, invariant).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was requested in a context where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),

    /// A persisted file is malformed (bad magic, truncated, unknown version).
    #[error("format error: {0}")]
    Format(String),

    /// A persisted artifact does not match the running architecture.
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
