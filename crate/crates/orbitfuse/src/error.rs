use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two points coincide (or fall below the softening radius in strict
    /// mode), so an inverse-square law cannot be evaluated.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward target must be a scalar, got length {0}")]
    NonScalarLoss(usize),

    #[error("missing depth sample for object {0}")]
    MissingDepth(usize),

    #[error("missing ground-truth z for object {0}")]
    MissingGroundtruthZ(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for validation problems the user can
    /// fix (bad arguments, malformed inputs), 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch(_)
            | Error::MissingDepth(_)
            | Error::MissingGroundtruthZ(_)
            | Error::LengthMismatch(_)
            | Error::InvalidConfig(_)
            | Error::MalformedFile { .. } => 1,
            Error::DegenerateGeometry(_)
            | Error::NonScalarLoss(_)
            | Error::NonFiniteLoss { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
