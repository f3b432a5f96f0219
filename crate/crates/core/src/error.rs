use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("shape mismatch for tensor `{name}`: file has {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("corrupt file `{path}`: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
