use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A record could not be decoded. `line` is 1-based.
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("document `{doc_id}`, token {token}: {reason}")]
    InvalidToken {
        doc_id: String,
        token: usize,
        reason: String,
    },

    #[error("document `{doc_id}`: {reason}")]
    InvalidDocument { doc_id: String, reason: String },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("labeling function `{lf_id}`: unknown class `{class}`")]
    UnknownClass { lf_id: String, class: String },

    #[error("duplicate labeling function id `{0}`")]
    DuplicateLf(String),

    #[error("labeling function `{lf_id}`: bad regex: {message}")]
    BadRegex { lf_id: String, message: String },

    #[error("labeling function `{lf_id}`: rule depth {depth} exceeds the limit of {limit}")]
    RuleDepth {
        lf_id: String,
        depth: usize,
        limit: usize,
    },

    #[error("invalid split request: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible synthetic target: {0}")]
    Infeasible(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the underlying filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
