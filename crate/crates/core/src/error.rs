use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structure error: {0}")]
    Structure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt token sequence: {0}")]
    CorruptSequence(String),

    #[error("id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_sequence {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("parse error in record {record}: {detail}")]
    Parse { record: usize, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing input artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("config error at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structure(_) => "structure",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::CorruptSequence(_) => "corrupt_sequence",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::Diverged { .. } => "diverged",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
