use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies in the declared singular set")]
    SingularPoint { point: Vec<f64> },

    #[error("non-finite value encountered while evaluating {what} at {point:?}")]
    NonFinite { what: &'static str, point: Vec<f64> },

    #[error("matrix is not positive semidefinite at {point:?} (smallest eigenvalue {eigenvalue:e})")]
    NotPsd { point: Vec<f64>, eigenvalue: f64 },

    #[error("matrix field is not anti-symmetric at {point:?} (|C + C^T| = {defect:e})")]
    NotAntisymmetric { point: Vec<f64>, defect: f64 },

    #[error("diffusion coefficient is not positive at y = {at} (a = {value:e})")]
    NonPositiveDiffusion { at: f64, value: f64 },

    #[error("quadrature did not converge: doubling the nodes moved the value by {change:e} (allowed {allowed:e})")]
    QuadratureNonConvergent { change: f64, allowed: f64 },

    #[error("cross-derivative stencil is not monotone at node {node:?}: axis conductance {conductance:e} < 0")]
    NonMonotoneStencil { node: Vec<f64>, conductance: f64 },

    #[error("linear solver stopped after {iterations} iterations with relative residual {residual:e}")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("global resolvent did not converge; last increment {last_increment:e} (profile {profile:?})")]
    NotConverged { last_increment: f64, profile: Vec<f64> },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("config error at line {line}, column {column}: {message}")]
    ConfigParse { line: usize, column: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
