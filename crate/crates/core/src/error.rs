use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV: {chunk} chunk: {reason}")]
    Decode { chunk: String, reason: String },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate noise source: {0}")]
    DegenerateNoise(String),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("manifest format: {0}")]
    ManifestFormat(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("clip too short: {got} samples, need at least {min} (one analysis window)")]
    TooShort { got: usize, min: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("cnn plan: {0}")]
    Plan(String),

    #[error("positional table holds {capacity} tokens, sequence needs {needed}")]
    Capacity { capacity: usize, needed: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("ensemble: {0}")]
    Ensemble(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.into(), detail: detail.into() }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}
