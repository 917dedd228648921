use thiserror::Error;

/// Errors produced by the robot model, solvers and the milling simulation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("node index {index} out of range (chain has {nodes} nodes)")]
    NodeOutOfRange { index: usize, nodes: usize },

    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("mass matrix is singular")]
    SingularMass,

    #[error("degenerate step: {0}")]
    DegenerateStep(String),

    #[error("dynamic displacement {displacement:e} m exceeds the sanity bound {bound:e} m at t = {time} s")]
    Unstable {
        time: f64,
        displacement: f64,
        bound: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
