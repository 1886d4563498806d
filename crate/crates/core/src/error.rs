use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("span [{start}, {end}] is out of range for a sentence of {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("mentions [{a_start}, {a_end}] and [{b_start}, {b_end}] of type `{label}` cross and cannot be encoded")]
    CrossingSpans {
        label: String,
        a_start: usize,
        a_end: usize,
        b_start: usize,
        b_end: usize,
    },

    #[error("duplicate mention [{start}, {end}] of type `{label}`")]
    DuplicateMention { start: usize, end: usize, label: String },

    #[error("unknown entity type `{0}`")]
    UnknownLabel(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown action token `{0}`")]
    UnknownAction(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("sentence needs {needed} encoder positions but the encoder window is {limit}")]
    SentenceTooLong { needed: usize, limit: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SpanOutOfRange { .. }
            | Error::CrossingSpans { .. }
            | Error::DuplicateMention { .. } => "span",
            Error::UnknownLabel(_) | Error::UnknownDataset(_) | Error::UnknownAction(_) => {
                "vocabulary"
            }
            Error::EmptySentence | Error::SentenceTooLong { .. } => "length",
            Error::Io { .. } => "io",
            Error::Parse { .. } | Error::Json(_) => "parse",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "numeric",
            Error::Invalid(_) => "invalid",
        }
    }
}
