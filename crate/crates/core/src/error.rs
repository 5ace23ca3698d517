use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration violates its invariants.
    #[error("config error: {0}")]
    Config(String),
    /// A caller broke an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// A loss or output became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A file did not match the expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
