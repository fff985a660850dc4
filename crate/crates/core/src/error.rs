//! Error types for estimation, normalization, and persistence.

use std::path::PathBuf;
use thiserror::Error;

/// Errors raised by the in-memory pipeline (conversions, estimation,
/// fitting, normalization).
#[derive(Debug, Error)]
pub enum StainError {
    #[error("image has no pixels")]
    EmptyImage,

    #[error("dimension mismatch: expected {expected} values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("stain matrix columns are collinear; cannot deconvolve")]
    SingularStainMatrix,

    #[error("insufficient tissue: {found} pixels above the OD threshold, need {required}")]
    InsufficientTissue { found: usize, required: usize },

    #[error("degenerate OD cloud: no well-defined dominant plane")]
    DegenerateCloud,

    #[error("degenerate stains: angle extremes are too close to separate two stains")]
    DegenerateStains,

    #[error("no projection angles available")]
    EmptyAngles,

    #[error("averaged plane basis is degenerate")]
    DegenerateBasis,

    #[error("invalid estimator parameters: {0}")]
    InvalidParams(String),

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("reference image {index}: {source}")]
    Reference {
        index: usize,
        #[source]
        source: Box<StainError>,
    },
}

impl StainError {
    /// Annotate an error with the index of the reference image it came from.
    pub(crate) fn for_reference(self, index: usize) -> StainError {
        StainError::Reference {
            index,
            source: Box::new(self),
        }
    }
}

/// Errors raised by image and profile persistence.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("failed to decode image: {0}")]
    DecodeError(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("profile schema version mismatch: {0}")]
    SchemaVersionMismatch(String),

    #[error("malformed profile document: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Stain(#[from] StainError),
}
