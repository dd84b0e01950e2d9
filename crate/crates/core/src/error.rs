use std::path::PathBuf;

use mrgr_numerics::NumericError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {msg}")]
    MalformedLine { line: usize, msg: String },

    #[error("line {line}: missing or invalid field `{field}`")]
    MissingField { line: usize, field: &'static str },

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("memory bank is empty")]
    EmptyMemory,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("stale artifact: {0}")]
    Stale(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
