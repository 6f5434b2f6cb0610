//! Error type shared by every stage of the pipeline.

use nalgebra::DVector;
use num_complex::Complex64;
use thiserror::Error;

use crate::trajectory::PiecewiseTrajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("{context} references unknown bus {bus}")]
    DanglingBus { bus: usize, context: String },

    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),

    #[error("unsupported case: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("quasi power flow diverged after {iterations} iterations (mismatch {mismatch:.3e})")]
    QpfDivergence {
        iterations: usize,
        mismatch: f64,
        last: Box<DVector<Complex64>>,
    },

    #[error("singular Jacobian in {0}")]
    SingularJacobian(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("series coefficients overflow beyond order {last_stable}")]
    OrderTruncation { last_stable: usize },

    #[error("Padé denominator vanishes at s = 1 in block {block}")]
    PoleAtEvaluation { block: String },

    #[error("Padé fit failed in block {block}: {source}")]
    PadeBlock {
        block: String,
        #[source]
        source: Box<Error>,
    },

    #[error("Ward reduction failed: {0}")]
    ReductionFailure(String),

    #[error("sensitivity computation failed: {0}")]
    SensitivityFailure(String),

    #[error("error bound undefined: {0}")]
    UndefinedBound(String),

    #[error("swing matrix is singular (numerical rank {rank} of {dim})")]
    SingularSystem { rank: usize, dim: usize },

    #[error("defective system matrix at eigenvalue {re:.6} + {im:.6}j")]
    Defective { re: f64, im: f64 },

    #[error("mode matrix is rank deficient ({rank} of {dim})")]
    FitDegeneracy { rank: usize, dim: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("constraint value {value:.3e} already exceeds eps {eps:.3e} at segment start")]
    InconsistentStart { value: f64, eps: f64 },

    #[error("consistent initialization failed after {iterations} iterations (residual {residual:.3e})")]
    ReinitFailure { iterations: usize, residual: f64 },

    #[error("series radius collapsed to {radius:.3e} s at t = {t:.4} s; increase the term count")]
    RadiusCollapse { radius: f64, t: f64 },

    #[error("power series oracle failed at order {order}: {msg}")]
    SeriesOracle { order: usize, msg: String },

    #[error("subspace angle undefined: row block of bus {0} is zero")]
    UndefinedAngle(usize),

    #[error("{source}")]
    Engine {
        #[source]
        source: Box<Error>,
        partial: Box<PiecewiseTrajectory>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn with_partial(self, partial: PiecewiseTrajectory) -> Error {
        Error::Engine {
            source: Box::new(self),
            partial: Box::new(partial),
        }
    }

    /// Partial trajectory carried by an engine failure, if any.
    pub fn partial(&self) -> Option<&PiecewiseTrajectory> {
        match self {
            Error::Engine { partial, .. } => Some(partial),
            _ => None,
        }
    }
}
