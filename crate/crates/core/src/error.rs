use std::io;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in `{name}`: {detail}")]
    Shape { name: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("stale tape: backward already ran on this tape; run a fresh forward pass")]
    StaleTape,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value in `{name}` at coordinate {index}")]
    NonFinite { name: String, index: usize },

    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(name: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        name: name.into(),
        detail: detail.into(),
    }
}
