use std::path::PathBuf;

use crate::field::DisplacementField;

/// Errors produced by the registration toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header field `{field}`: {reason}")]
    Header { field: String, reason: String },

    #[error("payload size mismatch: header declares {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("unsupported element type `{0}` (field ElementType)")]
    UnsupportedElementType(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("no body found: no voxel above threshold {threshold}")]
    NoBodyFound { threshold: f32 },

    #[error(
        "no confident correspondences: all {candidates} grid points fell below the similarity threshold {theta}; lower theta to accept weaker matches"
    )]
    NoConfidentCorrespondences { candidates: usize, theta: f32 },

    #[error("insufficient correspondences: need at least {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("singular transform: |det| = {det:e}")]
    SingularTransform { det: f64 },

    #[error("embedding is not unit-normalized")]
    Unnormalized,

    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite loss at level {level}, iteration {iteration}")]
    NonFiniteLoss {
        level: usize,
        iteration: usize,
        last_field: Box<DisplacementField>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn header(field: &str, reason: impl Into<String>) -> Self {
        Error::Header {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dims(left: [usize; 3], right: [usize; 3]) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimMismatch { left, right })
    }
}
