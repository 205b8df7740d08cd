use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum SpscError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell `{value}` at data row {row}, column `{column}`")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("non-monotone treatment indicator")]
    NonMonotoneTreatment,

    #[error("t0 = {t0} out of range for a panel with {len} periods")]
    T0OutOfRange { t0: usize, len: usize },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("time {t} outside basis domain [{lo}, {hi}]")]
    OutOfDomain { t: usize, lo: usize, hi: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("rank-deficient {what} (condition number {cond:.3e})")]
    RankDeficient { what: &'static str, cond: f64 },

    #[error("moment system is singular at rho = 0; set rho > 0 to target the minimum-norm weights")]
    SingularAtZeroRho,

    #[error("weight matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("singular {0} matrix")]
    Singular(&'static str),

    #[error("Newton iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("all {0} Monte Carlo replicates failed for estimator `{1}`")]
    AllReplicatesFailed(usize, String),

    #[error("too few observations: {0}")]
    TooFewObservations(String),
}

pub type Result<T> = std::result::Result<T, SpscError>;
