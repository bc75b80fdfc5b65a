use thiserror::Error;

/// Errors produced by market construction, solving, and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("beta must be strictly positive componentwise")]
    NonPositiveBeta,

    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse {
        line: usize,
        col: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("market generation failed: {0}")]
    GenerationFailed(String),

    #[error("solver stopped at optimality gap {gap:.3e} (target {tol:.3e})")]
    NotConverged { beta: Vec<f64>, gap: f64, tol: f64 },

    #[error("bootstrap replicate {index} failed: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no feasible tie split: stationarity residual {residual:.3e} exceeds {tol:.3e}")]
    InfeasibleTieSplit { residual: f64, tol: f64 },

    #[error("finite-difference stencil leaves the positive orthant (eta = {eta})")]
    StencilOutOfDomain { eta: f64 },

    #[error("matrix is not positive definite")]
    NotPd,

    #[error("active-set enumeration budget exceeded: |I0| = {degenerate} > {max}")]
    EnumerationBudget { degenerate: usize, max: usize },

    #[error("degenerate bootstrap weights: zero sample mean after {attempts} attempts")]
    DegenerateWeights { attempts: usize },

    #[error("seed search exhausted after {tried} seeds")]
    SeedSearchFailed { tried: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of numerical procedures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::Replicate { .. }
                | Error::InfeasibleTieSplit { .. }
                | Error::StencilOutOfDomain { .. }
                | Error::NotPd
                | Error::EnumerationBudget { .. }
                | Error::DegenerateWeights { .. }
                | Error::SeedSearchFailed { .. }
                | Error::GenerationFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
