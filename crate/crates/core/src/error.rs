use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline stages can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a single-file NIfTI-1 volume: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("corrupt NIfTI payload: {0}")]
    Corrupt(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("grid mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("brain extraction failed: {0}")]
    Extraction(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("tissue class {class} collapsed (weight {weight:e})")]
    ClassCollapse { class: usize, weight: f64 },

    #[error("series too short: {len} values, at least three visits are required")]
    SeriesTooShort { len: usize },

    #[error("scale error: {0}")]
    Scale(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
