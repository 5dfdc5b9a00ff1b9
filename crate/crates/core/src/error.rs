use thiserror::Error;

/// Errors raised by instance construction, the QP solver and the estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("parameter entry {index} = {value} outside [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feasible region is empty")]
    Infeasible,
    #[error("feasible region is unbounded")]
    Unbounded,
    #[error("weighted Hessian is singular (min eigenvalue {min_eigenvalue:e})")]
    DegenerateHessian { min_eigenvalue: f64 },
    #[error("active-set solver did not converge within {iterations} iterations")]
    QpNotConverged { iterations: usize },
    #[error("weight {index}: {source}")]
    AtWeight {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("objective count must be at least 2, got {0}")]
    BadArity(usize),
    #[error("weight grid needs at least 2 points in grid mode, got {0}")]
    BadGridSize(usize),
    #[error("invalid weight vector: {0}")]
    InvalidWeight(String),
    #[error("frontier is empty")]
    EmptyFrontier,
    #[error("observation set is empty")]
    NoObservations,
    #[error("objective is not strongly convex (lambda = {lambda:e})")]
    NotStronglyConvex { lambda: f64 },
    #[error("inconsistent v bounds: {0}")]
    EmptyBoundsBox(String),
    #[error("cutting-plane loop hit the iteration cap ({0}) before max CV <= delta")]
    IterationCapReached(usize),
    #[error("non-finite {0} in report output")]
    NonFinite(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("linear program failed: {0}")]
    Lp(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerics (as opposed to bad input or IO).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Infeasible
            | Error::Unbounded
            | Error::DegenerateHessian { .. }
            | Error::QpNotConverged { .. }
            | Error::NotStronglyConvex { .. }
            | Error::IterationCapReached(_)
            | Error::NonFinite(_)
            | Error::Lp(_) => true,
            Error::AtWeight { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
