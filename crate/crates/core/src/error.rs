use std::path::PathBuf;

use thiserror::Error;

use crate::register::RegistrationResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The logarithm of a rotation at (or within 1e-6 of) angle pi has no
    /// unique principal value.
    #[error("log map is ambiguous at rotation angle {angle:.9} rad (too close to pi)")]
    LogBranch { angle: f64 },

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("payload length mismatch in {path}: expected {expected} values, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid spacing in {path}: {spacing:?}")]
    InvalidSpacing { path: PathBuf, spacing: [f64; 3] },

    #[error("duplicate landmark name {0:?}")]
    DuplicateLandmark(String),

    #[error("not a rigid transform: {0}")]
    NonRigid(String),

    #[error("landmark {name:?} cannot be projected: depth {depth:.3e} mm is not in front of the camera")]
    Projection { name: String, depth: f64 },

    #[error("objective is not finite at component {component}")]
    NonFiniteObjective { component: usize },

    /// The optimizer hit a non-finite objective; the partial result holds
    /// the traces recorded up to the failure.
    #[error("optimization aborted after {} iterations: {reason}", partial.iterations_run)]
    OptimizationAborted {
        reason: String,
        partial: Box<RegistrationResult>,
    },

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    /// Maps `NotFound` to [`Error::MissingFile`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteObjective { .. }
                | Error::OptimizationAborted { .. }
                | Error::LogBranch { .. }
        )
    }
}
