//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// The input file does not match the declared column schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// More malformed rows than the configured budget allows.
    #[error("row error budget exhausted: {errors} malformed rows (budget {budget}); first: {first}")]
    RowBudget {
        errors: usize,
        budget: usize,
        first: String,
    },

    /// Operations on an empty trade sequence are not defined.
    #[error("empty tape: {0}")]
    EmptyTape(String),

    /// The requested scope selects no trades.
    #[error("empty scope: {0}")]
    EmptyScope(String),

    /// A parameter estimation could not be carried out.
    #[error("fit error: {0}")]
    Fit(String),

    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The kernel solve failed or is too ill-conditioned to trust.
    #[error("linear system: {0}")]
    LinearSystem(String),

    /// Invalid configuration or manifest.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
