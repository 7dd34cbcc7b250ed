//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by grid operations, solvers, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("interpolation is not defined on label volumes")]
    InterpolationOnLabels,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("need at least 2 slices along z, got {0}")]
    TooFewSlices(usize),

    #[error("unsupported Sobolev order {0}, expected 0, 1 or 2")]
    UnsupportedSobolevOrder(usize),

    #[error("kernel radius must be nonnegative, got {0}")]
    NegativeRadius(f64),

    #[error("expected a label volume, got intensity")]
    ExpectedLabelVolume,

    #[error("expected an intensity volume, got label")]
    ExpectedIntensityVolume,

    #[error("non-diffeomorphic state: Jacobian determinant {min_det} <= 0 (step size too large)")]
    NonDiffeomorphic { min_det: f64 },

    #[error("flow diverged: |v| = {max_v} exceeds the domain extent {extent}")]
    FlowInstability { max_v: f64, extent: f64 },

    #[error("solver stalled: no accepted step at minimum step size after {iterations} iterations")]
    SolverStall { iterations: usize },

    #[error("template/stack frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("section/motion count mismatch: {sections} sections, {motions} motions")]
    CountMismatch { sections: usize, motions: usize },

    #[error("image is constant; cannot estimate a threshold")]
    ConstantImage,

    #[error("tube exits the volume domain: {0}")]
    TubeExitsDomain(String),

    #[error("random diffeomorphism failed the Jacobian check after {0} attempts")]
    DiffeoRetryExhausted(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("stack manifest: {0}")]
    Manifest(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
