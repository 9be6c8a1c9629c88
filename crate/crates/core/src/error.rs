use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line {line}: unknown tag {tag:?}")]
    UnknownTag { line: usize, tag: String },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("length mismatch line {line}")]
    LengthMismatch { line: usize },

    #[error("invalid entity type {0:?}")]
    InvalidEntityType(String),

    #[error("no entities to stratify")]
    NoEntities,

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("template mismatch: {0}")]
    Template(String),

    #[error("expected {expected} predictions, got {actual}")]
    PredictionCount { expected: usize, actual: usize },

    #[error("backend returned HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },

    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("malformed backend response: {0}")]
    BadResponse(String),

    #[error("scripted backend has no completion for prompt {0}")]
    ScriptMiss(String),

    #[error("mock backend needs the gold sentence for the input")]
    MissingGold,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
