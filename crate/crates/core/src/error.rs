use thiserror::Error;

/// Unified error type for the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid static configuration: bad coefficient tables, malformed
    /// distributions, out-of-range parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric argument violated a precondition (negative time, a
    /// probability outside (0, 1), ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Root finding for the baseline hazard failed to bracket or converge.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A cohort or coefficient file could not be ingested.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A policy returned decisions that violate its contract (over capacity,
    /// duplicates, or ineligible individuals).
    #[error("policy contract violation: {0}")]
    PolicyContract(String),

    /// A metrics window or pairing request that the run layout cannot satisfy.
    #[error("metrics error: {0}")]
    Metrics(String),

    /// Events were observed out of order (an individual updated to a time
    /// before its own arrival).
    #[error("event ordering violation: {0}")]
    Ordering(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
