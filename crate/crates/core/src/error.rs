use thiserror::Error;

/// Errors raised by the numerical core and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing required configuration key `{0}`")]
    MissingKey(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value at iteration {iteration}: {message}")]
    NonFinite { iteration: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
