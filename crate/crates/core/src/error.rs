use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of range: {value} (allowed {allowed})")]
    Bound {
        what: &'static str,
        value: String,
        allowed: &'static str,
    },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate geometry at face {face}")]
    DegenerateFace { face: usize },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("direction is not unit length (norm {norm})")]
    Normalization { norm: f64 },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("stale or missing forward records: {0}")]
    State(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("point set is empty")]
    EmptySet,

    #[error("image of {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unsupported manifest version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

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

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
