use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no joint allocation satisfies the feasibility constraint")]
    EmptyFeasibleSet,
    #[error("enumeration of {size} joint allocations exceeds the cap of {cap}")]
    CapExceeded { size: u128, cap: u128 },
    #[error("design space has rank {rank} < dimension {dim}")]
    DegenerateDesign { rank: usize, dim: usize },
    #[error("full-space design gap {gap} exceeds {limit} after pruning")]
    PruneFailed { gap: f64, limit: f64 },
    #[error("query budget K = {k} must exceed d(d+1)/2 = {min}")]
    BadK { k: usize, min: usize },
    #[error("matrix is not positive definite")]
    SingularMatrix,
    #[error("allocation totals are not on a common grid")]
    NotOnGrid,
    #[error("pinning agent {0} to the zero allocation leaves no feasible joint allocation")]
    PivotInfeasible(usize),
    #[error("rationality parameter is not identifiable: all payment offsets are zero")]
    NonIdentifiable,
}
