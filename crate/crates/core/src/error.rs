use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,

    #[error("non-finite parameter in gaussian {index}")]
    NonFiniteParameter { index: usize },

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite value in {what}")]
    NonFiniteInput { what: &'static str },

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, term: String },

    #[error("non-finite loss term `{0}`")]
    NonFiniteTerm(&'static str),

    #[error("dimension mismatch in {context}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("scene has no primitives")]
    EmptyScene,

    #[error("view {view}: {message}")]
    View { view: usize, message: String },

    #[error("unknown view id {0}")]
    UnknownView(usize),

    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Numerical failures (NaN/Inf in the optimization) as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteParameter { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteInput { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteTerm(_)
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
