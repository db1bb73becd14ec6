use thiserror::Error;

/// Errors raised by the analysis library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (bandwidths, chain lengths, scales, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A CSV row or header that violates the dataset contract.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A required precondition on the data does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Lookup of an unknown covariate or quantity.
    #[error("unknown {kind} '{name}'")]
    Lookup { kind: &'static str, name: String },

    /// Estimation is not possible on the given data.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Summaries of empty series.
    #[error("summary error: {0}")]
    Summary(String),

    /// Numerical failure that should not happen for valid inputs.
    #[error("internal numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
