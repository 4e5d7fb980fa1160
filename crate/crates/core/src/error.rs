use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("stream error at entry {entry}: {message}")]
    Stream { entry: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("face detection failed on frame {frame_index}: {message}")]
    Detection { frame_index: u64, message: String },

    #[error("embedding failed: {0}")]
    Embedding(String),

    #[error("no precomputed score for ({stream_id}, {frame_index}, {label})")]
    MissingScore {
        stream_id: String,
        frame_index: u64,
        label: String,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("template error: unknown placeholder {{{0}}}")]
    Template(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
