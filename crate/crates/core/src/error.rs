//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the analysis pipeline.
///
/// Variants are grouped so a caller (e.g. the CLI) can map them onto
/// failure classes: configuration, I/O, or numeric trouble.
#[derive(Debug, Error)]
pub enum Error {
    /// Audio that violates the input contract (non-finite samples,
    /// wrong sample rate, too short for one analysis window).
    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    /// A configuration value outside its documented domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Calibration knots that are not strictly increasing in both axes.
    #[error("non-monotone calibration: {0}")]
    NonMonotoneCalibration(String),

    /// A detector window that does not fit inside the track.
    #[error("window out of bounds: center {t} size {n} on {frames} frames")]
    WindowOutOfBounds { t: usize, n: usize, frames: usize },

    /// Input that is structurally valid but unusable (e.g. an empty
    /// histogram handed to a distance function).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor or track shapes that do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Numeric failure: divergent loss, non-finite intermediate values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A dataset split that ended up empty after filtering.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A checkpoint that is missing, truncated, or of a foreign format.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    /// I/O failure with the offending path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
