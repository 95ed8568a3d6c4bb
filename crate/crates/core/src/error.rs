use thiserror::Error;

/// Errors raised by measures, solvers and the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample is empty")]
    EmptySample,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("weights sum to {sum}, expected 1 within 1e-12")]
    NotNormalized { sum: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("solver did not converge after {iterations} iterations (marginal error {marginal_error:e})")]
    NotConverged {
        iterations: usize,
        marginal_error: f64,
    },

    /// Forbidden (infinite-cost) routes leave some atom with nowhere to send mass.
    #[error("infeasible transport structure: {0}")]
    Infeasible(String),

    #[error("row {row} has no atom at finite cost (empty Gibbs support)")]
    EmptyGibbsSupport { row: usize },

    #[error("second marginal of the coupling deviates from the target by {error:e}")]
    MarginalMismatch { error: f64 },

    #[error("custom model declares no log-normalizer")]
    MissingNormalizer,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("{0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
