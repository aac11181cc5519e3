use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),

    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("logit at index {0} is not finite")]
    NonFiniteLogit(usize),

    #[error("probability vector is invalid: {0}")]
    InvalidDist(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("window must contain at least one token")]
    EmptyWindow,

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("token at position {position} has only {available} preceding tokens, {needed} needed")]
    InsufficientContext {
        position: usize,
        available: usize,
        needed: usize,
    },

    #[error("prefix {0:?} does not occur in the corpus")]
    PrefixAbsent(Vec<u32>),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
