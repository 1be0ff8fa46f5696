use thiserror::Error;

use crate::solver::TrajectoryRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unbound graph input `{0}`")]
    UnboundInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("matrix is singular: |det| = {0:e} is below the 1e-12 floor")]
    Singular(f64),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("model is not initialized: {0}")]
    Uninitialized(String),

    #[error("non-finite loss in layer `{layer}`")]
    NonFiniteLoss { layer: String },

    #[error("solver diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        trajectory: Vec<TrajectoryRecord>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::UnboundInput(_) | Error::NonScalarSeed(_) => "shape",
            Error::NonFinite(_) | Error::Singular(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::InvalidParam(_) | Error::Config(_) => "config",
            Error::Uninitialized(_) => "model",
            Error::Diverged { .. } => "solver",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
