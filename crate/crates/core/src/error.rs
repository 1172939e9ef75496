use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range 0..={max} for {what}")]
    Range {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unknown {what} `{name}`")]
    Lookup { what: &'static str, name: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("model state error: {0}")]
    State(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("reconstruction failed for `{utt_id}`: {reason}")]
    Reconstruction { utt_id: String, reason: String },

    #[error("experiment cell ({cell}) failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
