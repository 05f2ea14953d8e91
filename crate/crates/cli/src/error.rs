use thiserror::Error;

/// Errors surfaced by the scenario runner and reporting layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Scenario file problems: unreadable, unparsable (with line/column),
    /// or semantically invalid (empty axes, bad grid points).
    #[error("scenario error: {0}")]
    Scenario(String),

    /// Output-directory problems: unwritable, or already holding a
    /// different scenario's results.
    #[error("output error: {0}")]
    Output(String),

    /// A core simulation error, tagged with the task that produced it.
    #[error("simulation error: {0}")]
    Simulation(#[from] diversim_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
