use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A non-fatal problem attached to a location (file, line, email id).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("invalid dependency parse: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{location}: {message}")]
    Rejected { location: String, message: String },

    #[error("corpus looks malformed: {invalid} of {total} records invalid (first: {first})")]
    MalformedCorpus {
        invalid: usize,
        total: usize,
        first: String,
    },

    #[error("cannot split corpus: {0}")]
    Split(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("prototype projection failed: {0}")]
    Projection(String),

    #[error("prototype banks are not projected; project prototypes before explaining or serving")]
    NotProjected,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no positive-class prototypes available for edit suggestions")]
    NoPositivePrototypes,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("email {id}: {source}")]
    Encoding {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
