//! Scenario files: a base simulation configuration plus optional sweep axes,
//! replication count, and seed, loaded from human-editable TOML.
//!
//! The grid is the cross-product of every supplied axis (in the canonical
//! order `delta_inc`, `off_mean_days`, `beta`, `arrival_mean_days`,
//! `capacity`, `cohort`); an omitted axis contributes the single value from
//! `[config]`. Policies are not a grid axis: every point runs the full
//! policy list, with the null policy force-included so relative reports are
//! always well defined.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diversim_core::engine::SimulationConfig;
use diversim_core::hazard::BetaSpec;
use diversim_core::policy::{Policy, PolicyKind};
use diversim_core::population::CovariateDistribution;
use diversim_core::Days;

use crate::error::{Error, Result};

/// Hard ceiling on grid size so a typo cannot schedule an unbounded sweep.
pub const MAX_GRID_POINTS: usize = 10_000;

/// Which cohort distribution a run draws covariate profiles from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cohort {
    /// The bundled synthetic cohort as generated.
    Default,
    /// The bundled cohort reweighted toward younger profiles (ρ ∝ 100 − age).
    Younger,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Default => "default",
            Cohort::Younger => "younger",
        }
    }

    /// Materialize the covariate distribution, starting from `csv_path`
    /// when given, otherwise from the bundled cohort.
    pub fn distribution(self, csv_path: Option<&Path>) -> Result<CovariateDistribution> {
        let mut dist = match csv_path {
            Some(path) => {
                let (dist, warnings) = diversim_core::population::load_profiles(path)?;
                for w in warnings {
                    eprintln!("warning: cohort {}: {w}", path.display());
                }
                dist
            }
            None => CovariateDistribution::bundled(),
        };
        if self == Cohort::Younger {
            dist.reweight_younger()?;
        }
        Ok(dist)
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optional sweep axes; each entry is a non-empty list of values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_inc: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub off_mean_days: Option<Vec<Days>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<BetaSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_mean_days: Option<Vec<Days>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<Vec<Cohort>>,
}

impl Axes {
    pub fn grid_size(&self) -> usize {
        [
            self.delta_inc.as_ref().map_or(1, Vec::len),
            self.off_mean_days.as_ref().map_or(1, Vec::len),
            self.beta.as_ref().map_or(1, Vec::len),
            self.arrival_mean_days.as_ref().map_or(1, Vec::len),
            self.capacity.as_ref().map_or(1, Vec::len),
            self.cohort.as_ref().map_or(1, Vec::len),
        ]
        .iter()
        .product()
    }

    fn validate(&self) -> Result<()> {
        let empty: Vec<&str> = [
            ("delta_inc", self.delta_inc.as_ref().map_or(false, Vec::is_empty)),
            ("off_mean_days", self.off_mean_days.as_ref().map_or(false, Vec::is_empty)),
            ("beta", self.beta.as_ref().map_or(false, Vec::is_empty)),
            ("arrival_mean_days", self.arrival_mean_days.as_ref().map_or(false, Vec::is_empty)),
            ("capacity", self.capacity.as_ref().map_or(false, Vec::is_empty)),
            ("cohort", self.cohort.as_ref().map_or(false, Vec::is_empty)),
        ]
        .iter()
        .filter_map(|(name, is_empty)| is_empty.then_some(*name))
        .collect();
        if !empty.is_empty() {
            return Err(Error::Scenario(format!(
                "sweep axes must be non-empty lists; empty: {}",
                empty.join(", ")
            )));
        }
        Ok(())
    }
}

/// One resolved grid point: concrete values for every swept parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub delta_inc: f64,
    pub off_mean_days: Days,
    pub beta: BetaSpec,
    pub arrival_mean_days: Days,
    pub capacity: u32,
    pub cohort: Cohort,
}

impl GridPoint {
    /// The point's simulation config: the scenario base with this point's
    /// swept values substituted and the given policy installed.
    pub fn config(&self, base: &SimulationConfig, policy: Policy) -> SimulationConfig {
        SimulationConfig {
            delta_inc: self.delta_inc,
            off_mean_days: self.off_mean_days,
            beta: self.beta,
            arrival_mean_days: self.arrival_mean_days,
            capacity: self.capacity,
            policy,
            ..base.clone()
        }
    }

    /// Stable file-name fragment for this point.
    pub fn slug(&self) -> String {
        format!("p{:03}", self.index)
    }

    /// Compact human-readable label for tables and logs.
    pub fn label(&self) -> String {
        format!(
            "δ={} F_off={} β={} arr={} C={} cohort={}",
            self.delta_inc,
            self.off_mean_days,
            beta_label(&self.beta),
            self.arrival_mean_days,
            self.capacity,
            self.cohort
        )
    }
}

/// Compact one-token rendering of a treatment-effect spec for CSV columns.
pub fn beta_label(beta: &BetaSpec) -> String {
    match beta {
        BetaSpec::Homogeneous { value } => format!("{value}"),
        BetaSpec::PerGroup { low, high } => format!("low={low};high={high}"),
    }
}

/// A scenario: base config, sweep axes, replication count, seed, policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Name used in output file names and reports.
    pub name: String,
    /// Paired replications per grid point and policy.
    pub replications: u32,
    /// Base seed; all substreams derive from it deterministically.
    pub seed: u64,
    /// Policies evaluated at every grid point. The null policy is always
    /// included (it is the reference for relative reports).
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    /// Width of the age bands the age-first policy groups candidates into
    /// before its low-risk tie-break. 0 ranks by exact age (the tie-break
    /// then never fires). Defaults to five years: the rule is "youngest age
    /// group first, lowest risk within a group", not "youngest individual".
    #[serde(default = "default_age_bucket_days")]
    pub age_bucket_days: Days,
    /// Optional cohort CSV; the bundled synthetic cohort when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_csv: Option<String>,
    /// Cohort variant when the `cohort` axis is not swept.
    #[serde(default = "default_cohort")]
    pub cohort: Cohort,
    /// Base simulation parameters; omitted keys take model defaults.
    #[serde(default)]
    pub config: SimulationConfig,
    /// Optional sweep axes (cross-product grid).
    #[serde(default)]
    pub axes: Axes,
}

fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

fn default_age_bucket_days() -> Days {
    5.0 * 365.25
}

fn default_cohort() -> Cohort {
    Cohort::Default
}

impl Scenario {
    /// A single-point scenario around the default configuration.
    pub fn single(name: &str, replications: u32, seed: u64) -> Self {
        Scenario {
            name: name.to_string(),
            replications,
            seed,
            policies: default_policies(),
            age_bucket_days: default_age_bucket_days(),
            cohort_csv: None,
            cohort: Cohort::Default,
            config: SimulationConfig::default(),
            axes: Axes::default(),
        }
    }

    /// Parse a scenario from TOML text (errors carry line/column positions).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        scenario.normalize();
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Scenario(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))
    }

    /// Force-include the null policy and order policies canonically.
    fn normalize(&mut self) {
        let requested = std::mem::take(&mut self.policies);
        self.policies = PolicyKind::ALL
            .into_iter()
            .filter(|k| *k == PolicyKind::Null || requested.contains(k))
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Scenario("scenario name must be non-empty".into()));
        }
        if self.replications == 0 {
            return Err(Error::Scenario("replications must be ≥ 1".into()));
        }
        if !(self.age_bucket_days.is_finite() && self.age_bucket_days >= 0.0) {
            return Err(Error::Scenario("age_bucket_days must be finite and ≥ 0".into()));
        }
        self.axes.validate()?;
        let size = self.axes.grid_size();
        if size > MAX_GRID_POINTS {
            return Err(Error::Scenario(format!(
                "grid has {size} points, above the {MAX_GRID_POINTS} ceiling"
            )));
        }
        if let Some(path) = &self.cohort_csv {
            if !Path::new(path).exists() {
                return Err(Error::Scenario(format!("cohort_csv not found: {path}")));
            }
        }
        // Every grid point must yield a valid simulation config under every
        // policy (bucketing only matters for the age-first rule).
        for point in self.points() {
            for &kind in &self.policies {
                point
                    .config(&self.config, self.policy(kind))
                    .validate()
                    .map_err(|e| {
                        Error::Scenario(format!("grid point {} invalid: {e}", point.label()))
                    })?;
            }
        }
        Ok(())
    }

    /// The policy object for a policy kind, carrying the scenario's
    /// age-bucket width (0 → exact-age ranking).
    pub fn policy(&self, kind: PolicyKind) -> Policy {
        let bucket = (self.age_bucket_days > 0.0).then_some(self.age_bucket_days);
        Policy { kind, age_bucket_days: bucket }
    }

    /// Resolve the cross-product grid in canonical axis order.
    pub fn points(&self) -> Vec<GridPoint> {
        let deltas = self.axes.delta_inc.clone().unwrap_or(vec![self.config.delta_inc]);
        let offs = self.axes.off_mean_days.clone().unwrap_or(vec![self.config.off_mean_days]);
        let betas = self.axes.beta.clone().unwrap_or(vec![self.config.beta]);
        let arrivals =
            self.axes.arrival_mean_days.clone().unwrap_or(vec![self.config.arrival_mean_days]);
        let capacities = self.axes.capacity.clone().unwrap_or(vec![self.config.capacity]);
        let cohorts = self.axes.cohort.clone().unwrap_or(vec![self.cohort]);

        let mut points = Vec::with_capacity(self.axes.grid_size());
        for &delta_inc in &deltas {
            for &off_mean_days in &offs {
                for &beta in &betas {
                    for &arrival_mean_days in &arrivals {
                        for &capacity in &capacities {
                            for &cohort in &cohorts {
                                points.push(GridPoint {
                                    index: points.len(),
                                    delta_inc,
                                    off_mean_days,
                                    beta,
                                    arrival_mean_days,
                                    capacity,
                                    cohort,
                                });
                            }
                        }
                    }
                }
            }
        }
        points
    }

    /// Canonical serialized form: the bytes that are hashed into the
    /// manifest, byte-stable across load/save round trips.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always serializable")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        hex(&digest)
    }

    /// File-name-safe rendering of the scenario name.
    pub fn file_stem(&self) -> String {
        let stem: String = self
            .name
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
            .collect();
        let trimmed = stem.trim_matches('-');
        if trimmed.is_empty() { "scenario".to_string() } else { trimmed.to_string() }
    }

    /// Total number of engine runs the scenario schedules.
    pub fn total_runs(&self) -> usize {
        self.axes.grid_size() * self.policies.len() * self.replications as usize
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = Scenario::from_toml_str(
            r#"
            name = "baseline"
            replications = 20
            seed = 42
            "#,
        )
        .unwrap();
        assert_eq!(s.policies, PolicyKind::ALL.to_vec());
        assert_eq!(s.axes.grid_size(), 1);
        assert_eq!(s.points().len(), 1);
        assert_eq!(s.config, SimulationConfig::default());
        assert_eq!(s.total_runs(), 80);
    }

    #[test]
    fn null_policy_is_always_included_and_order_is_canonical() {
        let s = Scenario::from_toml_str(
            r#"
            name = "x"
            replications = 1
            seed = 0
            policies = ["high-risk", "low-risk"]
            "#,
        )
        .unwrap();
        assert_eq!(
            s.policies,
            vec![PolicyKind::Null, PolicyKind::LowRisk, PolicyKind::HighRisk]
        );
    }

    #[test]
    fn grid_is_the_cross_product_in_canonical_order() {
        let s = Scenario::from_toml_str(
            r#"
            name = "grid"
            replications = 2
            seed = 7
            [config]
            t_max = 6000.0
            [axes]
            delta_inc = [0.01, 0.05]
            off_mean_days = [365.0, 2000.0]
            capacity = [80]
            "#,
        )
        .unwrap();
        let points = s.points();
        assert_eq!(points.len(), 4);
        assert_eq!(
            points.iter().map(|p| (p.delta_inc, p.off_mean_days)).collect::<Vec<_>>(),
            vec![(0.01, 365.0), (0.01, 2000.0), (0.05, 365.0), (0.05, 2000.0)]
        );
        assert!(points.iter().all(|p| p.capacity == 80 && p.cohort == Cohort::Default));
        assert_eq!(points[3].slug(), "p003");
    }

    #[test]
    fn axis_values_override_the_base_config() {
        let s = Scenario::from_toml_str(
            r#"
            name = "o"
            replications = 1
            seed = 0
            [config]
            delta_inc = 0.048
            capacity = 80
            [axes]
            delta_inc = [0.1]
            "#,
        )
        .unwrap();
        let config = s.points()[0].config(&s.config, s.policy(PolicyKind::Null));
        assert_eq!(config.delta_inc, 0.1);
        assert_eq!(config.capacity, 80);
    }

    #[test]
    fn parse_errors_carry_positions_and_unknown_keys_are_rejected() {
        let err = Scenario::from_toml_str("name = \"x\"\nreplications = \"no\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "missing position info: {err}");
        let err = Scenario::from_toml_str(
            "name = \"x\"\nreplications = 1\nseed = 0\nbogus_key = 1\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("bogus_key"), "unknown key not named: {err}");
    }

    #[test]
    fn invalid_grid_points_are_rejected_with_their_label() {
        let err = Scenario::from_toml_str(
            r#"
            name = "bad"
            replications = 1
            seed = 0
            [axes]
            delta_inc = [0.01, 1.5]
            "#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("δ=1.5"), "label missing from: {err}");
    }

    #[test]
    fn empty_axes_and_oversized_grids_are_rejected() {
        let err = Scenario::from_toml_str("name = [broken").unwrap_err();
        assert!(matches!(err, Error::Scenario(_)));
        let err = Scenario::from_toml_str(
            r#"
            name = "e"
            replications = 1
            seed = 0
            [axes]
            capacity = []
            "#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("capacity"));
    }

    #[test]
    fn canonical_form_round_trips_and_hash_is_stable() {
        let s = Scenario::from_toml_str(
            r#"
            name = "round trip"
            replications = 3
            seed = 9
            policies = ["low-risk"]
            [axes]
            delta_inc = [0.01, 0.02]
            "#,
        )
        .unwrap();
        let text = s.canonical_toml();
        let reparsed = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s, reparsed);
        assert_eq!(s.hash(), reparsed.hash());
        assert_eq!(s.file_stem(), "round-trip");
    }

    #[test]
    fn beta_labels_are_compact() {
        assert_eq!(beta_label(&BetaSpec::homogeneous(0.342)), "0.342");
        assert_eq!(
            beta_label(&BetaSpec::PerGroup { low: 1.709, high: 0.068 }),
            "low=1.709;high=0.068"
        );
    }
}
