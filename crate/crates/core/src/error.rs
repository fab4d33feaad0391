use thiserror::Error;

use crate::measures::DiscreteDensity;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("metric is singular or indefinite (smallest eigenvalue {min_eigenvalue:e})")]
    SingularMetric { min_eigenvalue: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("JKO inner solver did not converge (residual {residual:e}); best iterate attached")]
    JkoNoConvergence {
        best: Box<DiscreteDensity>,
        residual: f64,
    },

    #[error("iterate left the domain: {0}")]
    OutOfDomain(String),

    #[error("every sampled pair was skipped")]
    EmptySample,

    #[error("exact transport instance has {entries} entries, cap is {cap}")]
    SizeCap { entries: usize, cap: usize },

    #[error("numerical underflow in scaling iterations")]
    NumericalUnderflow,

    #[error("explicit step dt={dt:e} exceeds the stability limit {limit:e}")]
    StabilityViolation { dt: f64, limit: f64 },

    #[error("density became negative ({min:e})")]
    NegativeDensity { min: f64 },

    #[error("test function gradient is not tangential at the boundary (normal derivative {normal_derivative:e})")]
    BoundaryIncompatible { normal_derivative: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
