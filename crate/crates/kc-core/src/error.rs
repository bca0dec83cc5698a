//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor `{name}`: unsupported dtype {dtype} (accepted: F32, F16, BF16)")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("dataset error (line {line}): {msg}")]
    Dataset { line: usize, msg: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("degenerate normalization: zero vector under rmsnorm")]
    NormDegenerate,

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
