//! Discrete-event, agent-based simulation of a probation system in which a
//! capacity-constrained treatment program diverts people from incarceration.
//!
//! Individuals arrive on probation, reoffend according to a proportional-
//! hazards model, and are incarcerated (removed) or returned to probation
//! when they do. A periodic review selects who receives treatment, which
//! lowers the reoffense hazard. The community's recent offense rate feeds
//! back into everyone's risk score, so treatment decisions have spillover
//! effects that the [`metrics`] module quantifies policy-by-policy.
//!
//! Module map:
//! - [`hazard`]: risk scores, baseline hazards, inverse-transform sampling,
//!   anchor-based calibration of the baseline rate and treatment effects.
//! - [`population`]: covariate profiles, cohort distributions (bundled,
//!   CSV-loaded, or synthesized), individual state and aging.
//! - [`policy`]: capacity-constrained treatment allocation rules.
//! - [`engine`]: the event loop — arrivals, offenses, probation endpoints,
//!   returns, and episode-boundary reviews.
//! - [`metrics`]: per-episode outcome series, windowed summaries, paired
//!   policy deltas with confidence intervals, and regime detection.
//! - [`seeds`]: deterministic substream seeding so paired runs share
//!   arrival/covariate randomness across policies.

pub mod engine;
pub mod error;
pub mod hazard;
pub mod metrics;
pub mod policy;
pub mod population;
pub mod seeds;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests for provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Times and durations are measured in days throughout.
pub type Days = f64;

/// Calendar-day length of a year, used for all age arithmetic.
pub const DAYS_PER_YEAR: f64 = 365.25;
