use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),

    #[error("point behind camera (z = {z:.3e})")]
    BehindCamera { z: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("loss node is not scalar (shape {rows}x{cols})")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value produced by `{op}`")]
    NonFiniteValue { op: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate depth alignment samples: {0}")]
    DegenerateSamples(String),

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("no valid entries to evaluate")]
    EmptyValidSet,

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), msg: msg.into() }
    }
}
