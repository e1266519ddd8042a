use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value on path {path} at step {step}")]
    NumericBlowup { path: usize, step: usize },
    #[error("paths do not splice: {0}")]
    Splice(String),
    #[error("unknown catalog entry `{name}`; available: {available}")]
    UnknownProblem { name: String, available: String },
    #[error("problem `{problem}`: {message}")]
    ProblemParameter { problem: String, message: String },
    #[error("partition size exceeds cap {cap}: `{limiting}` still fails at N = {cap}")]
    PlannerOverflow { cap: u64, limiting: &'static str },
    #[error("degenerate constants: {0}")]
    DegenerateConstants(String),
    #[error("regression basis: {0}")]
    Basis(String),
    #[error("Picard iteration diverged: gap ratio {ratio:.4} stayed >= 1 (iteration {iteration})")]
    Divergence { iteration: usize, ratio: f64 },
    #[error("Picard iteration did not reach tolerance {tol:e} within {max_iter} iterations (last gap {gap:e})")]
    NoConvergence { tol: f64, max_iter: usize, gap: f64 },
    #[error("contraction failed: measured ratio {measured:.4} >= 1 for three consecutive iterations")]
    ContractionFailure { measured: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transform domain: {0}")]
    TransformDomain(String),
    #[error("assumption {assumption}: {message}")]
    Audit { assumption: &'static str, message: String },
    #[error("level {level}: {source}")]
    Level { level: usize, source: Box<Error> },
    #[error("reflection: {0}")]
    Reflection(String),
    #[error("projection did not settle within {cap} pushes at step {step}")]
    ProjectionNonConvergence { step: usize, cap: usize },
}
