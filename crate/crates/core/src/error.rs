use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or model settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API used out of order or on the wrong kind of value.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    /// A binary or text container that does not match its format.
    #[error("invalid file format: {0}")]
    Format(String),
    /// Input data for which the requested statistic is undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
