use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("value is not a number at index {0}")]
    NaN(usize),

    #[error("mask value {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },

    #[error("empty statistics region")]
    EmptyRegion,

    #[error("no nonzero region")]
    NoNonzero,

    #[error("bounding box out of range: {0}")]
    BoxOutOfRange(String),

    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad NIfTI header field `{field}`: {detail}")]
    NiftiHeader { field: &'static str, detail: String },

    #[error("unsupported datatype {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated data section: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("failed to load ensemble member {path}: {source}")]
    Member {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
