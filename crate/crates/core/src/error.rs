use thiserror::Error;

/// Problems with input data or with how a model refers to it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("row {row}: outcome {value} is not 0 or 1")]
    NonBinaryOutcome { row: usize, value: f64 },
    #[error("level-2 cluster `{level2}` appears under level-3 clusters `{first}` and `{second}`")]
    BrokenNesting {
        level2: String,
        first: String,
        second: String,
    },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("need at least 2 level-2 clusters, found {found}")]
    TooFewClusters { found: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is used more than once")]
    DuplicateColumn(String),
    #[error("column `{name}` has {got} values, expected {expected}")]
    LengthMismatch { name: String, got: usize, expected: usize },
    #[error("random effects at one level may have at most {max} terms, got {got}")]
    TooManyRandomEffects { got: usize, max: usize },
    #[error("csv: {0}")]
    Csv(String),
}

/// Failures of the estimator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("quadrature node count must be in 1..=50, got {0}")]
    BadNodeCount(usize),
    #[error("marginal log-likelihood is not finite")]
    NonFiniteLikelihood,
    #[error("separation detected: |beta[{index}]| = {value:.3} exceeds the bound")]
    SeparationDetected { index: usize, value: f64 },
    #[error("observed information is singular")]
    SingularInformation,
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("posterior mode search failed")]
    ModeSearchFailure,
    #[error("parameter dimensions do not match the design")]
    DimensionMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Failures of the goodness-of-fit building blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GofError {
    #[error("smallest level-2 cluster has {n_min} rows; at least 2 are needed")]
    TooFewObservations { n_min: usize },
    #[error("group count must be at least 2, got {0}")]
    BadGroupCount(usize),
    #[error("covariance of the indicator coefficients is singular")]
    SingularCovariance,
    #[error("gamma has length {gamma} but its covariance is {rows}x{cols}")]
    DimensionMismatch { gamma: usize, rows: usize, cols: usize },
}

/// Invalid simulation settings.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("ICC must lie strictly between 0 and 1, got {0}")]
    BadIcc(f64),
    #[error("replication count must be at least 1")]
    NoReplications,
    #[error("invalid scenario: {0}")]
    BadScenario(String),
}
