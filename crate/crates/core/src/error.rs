use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("numerically zero region: rectangle probability {prob:e} below 1e-300")]
    ZeroRegion { prob: f64 },

    #[error("vanishing truncation mass {prob:e} for component {component}")]
    VanishingMass { component: usize, prob: f64 },

    #[error(
        "degenerate truncation: acceptance probability {prob:e} is below 1e-8; \
         reparameterize the model or the support"
    )]
    DegenerateTruncation { prob: f64 },

    #[error("row {row}: every component density is zero")]
    ResponsibilityUnderflow { row: usize },

    #[error("dying component {component}: weight {weight:e} fell below 1e-8")]
    DyingComponent { component: usize, weight: f64 },

    #[error("non-finite log-likelihood at iteration {iteration}")]
    NonFiniteLoglik { iteration: usize },

    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },

    #[error("non-monotone outcome: rare point {rare:?} lies below safe point {safe:?}")]
    NonMonotone { rare: Vec<f64>, safe: Vec<f64> },

    #[error(
        "outer approximation needs {count} candidate pieces (limit 1e6); \
         lower the frontier size limit"
    )]
    PieceExplosion { count: usize },

    #[error("infeasible piece: lower bound exceeds upper bound in coordinate {coord}")]
    InfeasiblePiece { coord: usize },

    #[error("active-set solver did not converge in {iterations} iterations (last iterate {last:?})")]
    SolverNonConvergence { iterations: usize, last: Vec<f64> },

    #[error("non-finite likelihood ratio at {x:?}")]
    NonFiniteRatio { x: Vec<f64> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`Error::Context`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
