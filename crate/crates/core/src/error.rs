use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{kernel}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{kernel}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        kernel: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("paging: {0}")]
    Paging(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
