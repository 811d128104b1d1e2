//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model fitting, marginal estimation, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// The solver did not converge within the iteration budget.
    #[error("estimating equations did not converge after {iterations} iterations (max |score| = {max_score:.3e})")]
    NonConvergence { iterations: usize, max_score: f64 },

    /// The design matrix is rank deficient; no column is dropped silently.
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficientDesign { rank: usize, cols: usize },

    /// Binomial fit diverged with fitted probabilities pinned at 0/1.
    #[error("separation detected: fitted probabilities pinned at 0/1 (max |linear predictor| = {max_eta:.1})")]
    SeparationDetected { max_eta: f64 },

    /// Outcome values are incompatible with the requested family.
    #[error("invalid data for family {family}: {message}")]
    InvalidFamilyData { family: String, message: String },

    /// The bread matrix cannot be inverted at tolerance.
    #[error("bread matrix is singular (reciprocal condition number {rcond:.3e} < 1e-12)")]
    SingularBread { rcond: f64 },

    /// An arm-specific estimate was requested for an arm with no patients.
    #[error("arm {arm} has no patients")]
    EmptyArm { arm: usize },

    /// Vector/matrix dimensions do not agree.
    #[error("dimension mismatch: {message}")]
    DimensionMismatch { message: String },

    /// A variance method needing fit internals was used with a failed fit.
    #[error("fit did not converge; variance method unavailable")]
    NotConverged,

    /// Log-scale confidence intervals need a strictly positive estimate.
    #[error("log-scale confidence interval requires a positive estimate (got {estimate})")]
    NonPositiveEstimateForLogScale { estimate: f64 },

    /// Block size incompatible with the assignment probabilities.
    #[error("block size {block_size} cannot realise assignment probabilities exactly")]
    OddBlockForProbabilities { block_size: usize },

    /// A column named in the schema is absent from the CSV header.
    #[error("column '{column}' not found in input")]
    MissingColumn { column: String },

    /// A cell that must be numeric is not.
    #[error("non-numeric value '{value}' in column '{column}', data row {row}")]
    NonNumericValue { column: String, row: usize, value: String },

    /// An empty cell. Missing data is a hard error; no imputation is done.
    #[error("missing value in column '{column}', data row {row}")]
    MissingValue { column: String, row: usize },

    /// Follow-up times must be strictly positive.
    #[error("non-positive follow-up time {value} in data row {row}")]
    NonPositiveFollowup { row: usize, value: f64 },

    /// Dataset-level invariant violation (ragged covariates, single arm, ...).
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// Model or analysis configuration error.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Too many replicates failed to fit; results would be unreliable.
    #[error("simulation aborted: {failed} of {total} replicates failed to fit (> 5%)")]
    ExcessiveFailures { failed: usize, total: usize },

    /// A grid cell of an analysis failed; wraps the underlying cause.
    #[error("computing {estimator} ({method}) for arm {arm}: {source}")]
    CellFailure {
        arm: usize,
        estimator: String,
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code class: 2 for data/configuration errors, 3 for
    /// convergence/numerical errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. }
            | Error::SeparationDetected { .. }
            | Error::SingularBread { .. }
            | Error::NotConverged => 3,
            Error::CellFailure { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
