use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} of the constraint matrix has (near-)zero norm {norm:e}")]
    ZeroRow { row: usize, norm: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("linear program is unbounded in the requested direction")]
    Unbounded,

    #[error("ball center violates the polytope by {violation:e} (tolerance {tol:e})")]
    CenterOutside { violation: f64, tol: f64 },

    #[error("{what} produced a non-finite value")]
    NonFiniteOutput { what: &'static str },

    #[error("operation requires a quadratic-aggregative cost model")]
    UnsupportedModel,

    #[error("invalid distribution parameters: {0}")]
    InvalidDistributionParams(String),

    #[error("sampled feasibility domain is empty")]
    EmptyDomain,

    #[error("operation is not defined for this uncertainty kind: {0}")]
    UnsupportedKind(&'static str),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("tightened domain is empty for the combination with untightened rows {untightened:?}")]
    EmptyAfterTightening { untightened: Vec<usize> },

    #[error(
        "step matrix is not positive definite: tau * ||A|| = {product} >= 1 \
         (tau = {tau}, ||A|| = {norm_a})"
    )]
    NotPositiveDefinite { tau: f64, norm_a: f64, product: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("no feasible multiplier piece available for projection")]
    NoFeasiblePiece,

    #[error("pipeline rerun deviated from the reference equilibrium by {deviation:e}")]
    NonReproduciblePipeline { deviation: f64 },

    #[error("region of deviations is empty")]
    EmptyRegion,

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
