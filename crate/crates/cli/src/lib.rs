//! Runnable surface of the diversion-program simulator: scenario files,
//! the replication/sweep runner with reproducible seed derivation and
//! resume, episode/aggregate CSV reporting, and an invariant suite.

pub mod error;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod suite;

pub use error::{Error, Result};
