//! Covariate profiles, cohort distributions, and per-individual state.
//!
//! A cohort is a weighted empirical distribution over covariate profiles.
//! Profiles can be loaded from CSV, taken from the bundled synthetic cohort,
//! or synthesized with configurable marginals. Sampling a profile draws the
//! row categorically and then a concrete age uniformly within the row's age
//! category.

use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Days, DAYS_PER_YEAR};

/// The nine categorical covariates of the risk model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Employment,
    AgeCategory,
    PriorFelonies,
    PrevOffenseType,
    Sex,
    Ethnicity,
    DrugAbuse,
    Race,
    Supervision,
}

impl Covariate {
    pub const ALL: [Covariate; 9] = [
        Covariate::Employment,
        Covariate::AgeCategory,
        Covariate::PriorFelonies,
        Covariate::PrevOffenseType,
        Covariate::Sex,
        Covariate::Ethnicity,
        Covariate::DrugAbuse,
        Covariate::Race,
        Covariate::Supervision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Employment => "employment",
            Covariate::AgeCategory => "age_category",
            Covariate::PriorFelonies => "prior_felonies",
            Covariate::PrevOffenseType => "prev_offense_type",
            Covariate::Sex => "sex",
            Covariate::Ethnicity => "ethnicity",
            Covariate::DrugAbuse => "drug_abuse",
            Covariate::Race => "race",
            Covariate::Supervision => "supervision",
        }
    }

    /// Number of levels; valid levels are `1..=level_count`.
    pub fn level_count(self) -> u8 {
        match self {
            Covariate::Employment => 3,
            Covariate::AgeCategory => 6,
            Covariate::PriorFelonies => 3,
            Covariate::PrevOffenseType => 8,
            Covariate::Sex => 2,
            Covariate::Ethnicity => 2,
            Covariate::DrugAbuse => 3,
            Covariate::Race => 5,
            Covariate::Supervision => 6,
        }
    }

    pub fn parse(name: &str) -> Option<Covariate> {
        Covariate::ALL.iter().copied().find(|c| c.name() == name)
    }

    pub(crate) fn index(self) -> usize {
        Covariate::ALL.iter().position(|c| *c == self).expect("listed")
    }

    /// Validate a level for this covariate, with a spec-style message.
    pub fn check_level(self, level: u8) -> Result<()> {
        if level < 1 || level > self.level_count() {
            return Err(Error::Config(format!(
                "{}: level {} outside [1,{}]",
                self.name(),
                level,
                self.level_count()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Risk group fixed at arrival: below/above the reference population median.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

/// Numeric bounds closing the open-ended age categories for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeBounds {
    /// Lower edge of the "<20" category, years.
    pub youngest_years: f64,
    /// Upper edge of the "50+" category, years.
    pub oldest_years: f64,
}

impl Default for AgeBounds {
    fn default() -> Self {
        Self { youngest_years: 16.0, oldest_years: 65.0 }
    }
}

impl AgeBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.youngest_years < 20.0 && self.youngest_years >= 0.0) {
            return Err(Error::Config(format!(
                "age bounds: youngest_years {} must lie in [0,20)",
                self.youngest_years
            )));
        }
        if self.oldest_years <= 50.0 {
            return Err(Error::Config(format!(
                "age bounds: oldest_years {} must exceed 50",
                self.oldest_years
            )));
        }
        Ok(())
    }

    /// Half-open `[lo, hi)` age range of a category, years.
    pub fn category_range(&self, category: u8) -> Result<(f64, f64)> {
        Covariate::AgeCategory.check_level(category)?;
        Ok(match category {
            1 => (self.youngest_years, 20.0),
            2 => (20.0, 25.0),
            3 => (25.0, 30.0),
            4 => (30.0, 40.0),
            5 => (40.0, 50.0),
            _ => (50.0, self.oldest_years),
        })
    }
}

/// Map a continuous age in years to its category (1..=6).
pub fn age_category_from_years(age_years: f64) -> u8 {
    if age_years < 20.0 {
        1
    } else if age_years < 25.0 {
        2
    } else if age_years < 30.0 {
        3
    } else if age_years < 40.0 {
        4
    } else if age_years < 50.0 {
        5
    } else {
        6
    }
}

/// One cohort row: categorical levels, a concrete age, and the observed
/// probation term drawn jointly with the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateProfile {
    pub employment: u8,
    pub age_category: u8,
    pub prior_felonies: u8,
    pub prev_offense_type: u8,
    pub sex: u8,
    pub ethnicity: u8,
    pub drug_abuse: u8,
    pub race: u8,
    pub supervision: u8,
    /// Concrete age; the representative age of the row until a sample
    /// redraws it within the category.
    pub age_years: f64,
    /// Observed probation term carried with the profile.
    pub probation_term_days: Days,
}

impl CovariateProfile {
    pub fn level(&self, covariate: Covariate) -> u8 {
        match covariate {
            Covariate::Employment => self.employment,
            Covariate::AgeCategory => self.age_category,
            Covariate::PriorFelonies => self.prior_felonies,
            Covariate::PrevOffenseType => self.prev_offense_type,
            Covariate::Sex => self.sex,
            Covariate::Ethnicity => self.ethnicity,
            Covariate::DrugAbuse => self.drug_abuse,
            Covariate::Race => self.race,
            Covariate::Supervision => self.supervision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for covariate in Covariate::ALL {
            covariate.check_level(self.level(covariate))?;
        }
        if !(self.probation_term_days > 0.0 && self.probation_term_days.is_finite()) {
            return Err(Error::Config(format!(
                "probation term must be positive and finite, got {}",
                self.probation_term_days
            )));
        }
        if !(self.age_years >= 0.0 && self.age_years.is_finite()) {
            return Err(Error::Config(format!("age must be nonnegative, got {}", self.age_years)));
        }
        if age_category_from_years(self.age_years) != self.age_category {
            return Err(Error::Config(format!(
                "age {} years is inconsistent with age category {}",
                self.age_years, self.age_category
            )));
        }
        Ok(())
    }
}

/// Weighted empirical distribution over covariate profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateDistribution {
    support: Vec<CovariateProfile>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    age_bounds: AgeBounds,
}

impl CovariateDistribution {
    /// Build a distribution, renormalizing `weights`. Weight sums farther
    /// than 1e-3 from 1 are rejected; callers that construct weights
    /// programmatically should pass them already normalized.
    pub fn new(
        support: Vec<CovariateProfile>,
        weights: Vec<f64>,
        age_bounds: AgeBounds,
    ) -> Result<Self> {
        age_bounds.validate()?;
        if support.is_empty() {
            return Err(Error::Config("covariate distribution has empty support".into()));
        }
        if support.len() != weights.len() {
            return Err(Error::Config(format!(
                "support has {} profiles but {} weights",
                support.len(),
                weights.len()
            )));
        }
        for profile in &support {
            profile.validate()?;
        }
        let sum = weight_sum(&weights)?;
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Config(format!(
                "profile weights sum to {sum}, farther than 1e-3 from 1"
            )));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        let cumulative = cumulative_weights(&weights);
        Ok(Self { support, weights, cumulative, age_bounds })
    }

    /// Uniform weights over the given profiles.
    pub fn uniform(support: Vec<CovariateProfile>, age_bounds: AgeBounds) -> Result<Self> {
        let n = support.len().max(1);
        let weights = vec![1.0 / n as f64; support.len()];
        Self::new(support, weights, age_bounds)
    }

    /// The synthetic cohort shipped with the crate (1000 profiles).
    pub fn bundled() -> Self {
        let raw = include_str!("../data/cohort_default.csv");
        let (dist, warnings) =
            Self::from_csv_reader(raw.as_bytes(), AgeBounds::default()).expect("bundled cohort");
        assert!(warnings.is_empty(), "bundled cohort should load cleanly");
        dist
    }

    /// Load profiles from CSV. Returns the distribution plus any non-fatal
    /// warnings (currently: weight renormalization).
    ///
    /// Schema (header required): `employment,age_category,prior_felonies,
    /// prev_offense_type,sex,ethnicity,drug_abuse,race,supervision,
    /// age_years,probation_term_days,weight`. The weight column is optional;
    /// omitted weights are uniform.
    pub fn from_csv_reader<R: Read>(
        reader: R,
        age_bounds: AgeBounds,
    ) -> Result<(Self, Vec<String>)> {
        let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut support = Vec::new();
        let mut weights: Vec<Option<f64>> = Vec::new();
        for (index, record) in csv_reader.deserialize::<ProfileRow>().enumerate() {
            let row_number = index + 2; // header is row 1
            let row = record.map_err(|e| Error::Ingestion(format!("row {row_number}: {e}")))?;
            let profile = row.profile();
            profile
                .validate()
                .map_err(|e| Error::Ingestion(format!("row {row_number}: {e}")))?;
            if let Some(w) = row.weight {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Ingestion(format!(
                        "row {row_number}: weight {w} must be nonnegative and finite"
                    )));
                }
            }
            support.push(profile);
            weights.push(row.weight);
        }
        if support.is_empty() {
            return Err(Error::Ingestion("profile file contains no rows".into()));
        }
        let explicit = weights.iter().filter(|w| w.is_some()).count();
        if explicit != 0 && explicit != weights.len() {
            return Err(Error::Ingestion(
                "weight column must be present on every row or on none".into(),
            ));
        }
        let mut warnings = Vec::new();
        let weights: Vec<f64> = if explicit == 0 {
            vec![1.0 / support.len() as f64; support.len()]
        } else {
            let raw: Vec<f64> = weights.into_iter().map(|w| w.unwrap_or(0.0)).collect();
            let sum = weight_sum(&raw).map_err(|e| Error::Ingestion(e.to_string()))?;
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::Ingestion(format!(
                    "profile weights sum to {sum}, farther than 1e-3 from 1"
                )));
            }
            if (sum - 1.0).abs() > 1e-9 {
                warnings.push(format!("profile weights summed to {sum}; renormalized"));
            }
            raw.into_iter().map(|w| w / sum).collect()
        };
        let dist = Self::new(support, weights, age_bounds)?;
        Ok((dist, warnings))
    }

    /// Load profiles from a CSV file; see [`Self::from_csv_reader`].
    pub fn from_csv_path<P: AsRef<Path>>(
        path: P,
        age_bounds: AgeBounds,
    ) -> Result<(Self, Vec<String>)> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Ingestion(format!("cannot open profile file {}: {e}", path.display()))
        })?;
        Self::from_csv_reader(file, age_bounds)
    }

    fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let k = self.cumulative.partition_point(|c| *c <= u);
        k.min(self.support.len() - 1)
    }

    /// Draw a profile (categorical by weight), then a concrete age uniformly
    /// within the profile's age-category bounds. Consumes exactly two
    /// uniforms per call.
    pub fn sample_profile<R: Rng + ?Sized>(&self, rng: &mut R) -> CovariateProfile {
        let mut profile = self.support[self.sample_index(rng)].clone();
        let (lo, hi) = self
            .age_bounds
            .category_range(profile.age_category)
            .expect("validated at construction");
        profile.age_years = lo + (hi - lo) * rng.gen::<f64>();
        profile
    }

    /// Reweight the support toward younger profiles:
    /// ρ_k ∝ (100 − age_k), using each row's representative age.
    pub fn reweight_younger(&mut self) -> Result<()> {
        let ages: Vec<f64> = self.support.iter().map(|p| p.age_years).collect();
        self.weights = younger_weights(&ages)?;
        self.cumulative = cumulative_weights(&self.weights);
        Ok(())
    }

    pub fn support(&self) -> &[CovariateProfile] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn age_bounds(&self) -> AgeBounds {
        self.age_bounds
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// Weights proportional to (100 − age): ages 20 and 60 map to (2/3, 1/3).
pub fn younger_weights(ages: &[f64]) -> Result<Vec<f64>> {
    if ages.is_empty() {
        return Err(Error::Config("cannot reweight an empty cohort".into()));
    }
    let raw: Vec<f64> = ages.iter().map(|a| 100.0 - a).collect();
    if let Some(age) = ages.iter().find(|a| **a >= 100.0) {
        return Err(Error::Config(format!(
            "younger reweighting needs ages below 100, got {age}"
        )));
    }
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

fn weight_sum(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("profile weights must be nonnegative and finite".into()));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Config("profile weights sum to zero".into()));
    }
    Ok(sum)
}

fn cumulative_weights(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    employment: u8,
    age_category: u8,
    prior_felonies: u8,
    prev_offense_type: u8,
    sex: u8,
    ethnicity: u8,
    drug_abuse: u8,
    race: u8,
    supervision: u8,
    age_years: f64,
    probation_term_days: f64,
    weight: Option<f64>,
}

impl ProfileRow {
    fn profile(&self) -> CovariateProfile {
        CovariateProfile {
            employment: self.employment,
            age_category: self.age_category,
            prior_felonies: self.prior_felonies,
            prev_offense_type: self.prev_offense_type,
            sex: self.sex,
            ethnicity: self.ethnicity,
            drug_abuse: self.drug_abuse,
            race: self.race,
            supervision: self.supervision,
            age_years: self.age_years,
            probation_term_days: self.probation_term_days,
        }
    }
}

/// Load a cohort CSV with default age bounds; returns warnings alongside.
pub fn load_profiles<P: AsRef<Path>>(path: P) -> Result<(CovariateDistribution, Vec<String>)> {
    CovariateDistribution::from_csv_path(path, AgeBounds::default())
}

/// One person in the simulated community.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: u64,
    pub profile: CovariateProfile,
    /// Start of the latest probation term.
    pub arrival_time: Days,
    /// Age at the start of the latest probation term.
    pub initial_age_days: Days,
    pub age_days: Days,
    /// Cumulative offenses across all terms (j).
    pub offense_count: u32,
    pub return_count: u32,
    pub off_probation: bool,
    /// Still awaiting a treatment decision at the next episode boundary.
    pub not_decided: bool,
    pub treated: bool,
    pub probation_term_days: Days,
    pub off_probation_term_days: Days,
    pub exit_time: Days,
    pub risk_group: RiskGroup,
    /// Validity token for end-probation/exit/return events.
    pub lifecycle_gen: u32,
    /// Validity token for offense events (bumped on treatment resampling).
    pub offense_gen: u32,
}

impl Individual {
    /// Fresh arrival at time `t` with newly drawn terms.
    pub fn new(
        id: u64,
        profile: CovariateProfile,
        t: Days,
        probation_term_days: Days,
        off_probation_term_days: Days,
        risk_group: RiskGroup,
    ) -> Self {
        let initial_age_days = profile.age_years * DAYS_PER_YEAR;
        Self {
            id,
            profile,
            arrival_time: t,
            initial_age_days,
            age_days: initial_age_days,
            offense_count: 0,
            return_count: 0,
            off_probation: false,
            not_decided: true,
            treated: false,
            probation_term_days,
            off_probation_term_days,
            exit_time: t + probation_term_days + off_probation_term_days,
            risk_group,
            lifecycle_gen: 0,
            offense_gen: 0,
        }
    }

    /// Re-enter probation at time `t` with fresh terms. Profile, offense
    /// count, treatment, and decision flags persist; the age baseline and
    /// scheduled times restart from `t`.
    pub fn reenter(&mut self, t: Days, probation_term_days: Days, off_probation_term_days: Days) {
        self.arrival_time = t;
        self.initial_age_days = self.age_days;
        self.off_probation = false;
        self.probation_term_days = probation_term_days;
        self.off_probation_term_days = off_probation_term_days;
        self.exit_time = t + probation_term_days + off_probation_term_days;
    }

    /// Advance age to event time `t`; count the offense when the event is one.
    pub fn update_dynamics(&mut self, t: Days, is_offense: bool) -> Result<()> {
        if t < self.arrival_time {
            return Err(Error::Ordering(format!(
                "individual {} updated at t={t} before its arrival at {}",
                self.id, self.arrival_time
            )));
        }
        self.age_days = self.initial_age_days + (t - self.arrival_time);
        if is_offense {
            self.offense_count += 1;
        }
        Ok(())
    }

    pub fn age_years(&self) -> f64 {
        self.age_days / DAYS_PER_YEAR
    }

    pub fn on_probation(&self) -> bool {
        !self.off_probation
    }

    pub fn end_probation_time(&self) -> Days {
        self.arrival_time + self.probation_term_days
    }
}

/// Midpoint median of a score list.
pub fn risk_median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("risk-group reference scores are empty".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Ok(if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) })
}

/// High iff the score reaches the reference median (ties high).
pub fn classify_risk_group(reference_scores: &[f64], risk: f64) -> Result<RiskGroup> {
    let median = risk_median(reference_scores)?;
    Ok(if risk >= median { RiskGroup::High } else { RiskGroup::Low })
}

/// Per-covariate categorical marginals for the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateMarginals {
    pub employment: Vec<f64>,
    pub age_category: Vec<f64>,
    pub prior_felonies: Vec<f64>,
    pub prev_offense_type: Vec<f64>,
    pub sex: Vec<f64>,
    pub ethnicity: Vec<f64>,
    pub drug_abuse: Vec<f64>,
    pub race: Vec<f64>,
    pub supervision: Vec<f64>,
}

impl Default for CovariateMarginals {
    /// Defaults concentrate age mass in the 20–39 bands and spread the
    /// wide-span covariates toward their extremes, so that static risk is
    /// driven mostly by non-age attributes (corr(score, age) ≈ −0.33).
    /// Rankings by age and by risk then pick visibly different people,
    /// which keeps the allocation policies distinguishable.
    fn default() -> Self {
        Self {
            employment: vec![0.40, 0.10, 0.50],
            age_category: vec![0.04, 0.30, 0.34, 0.26, 0.04, 0.02],
            prior_felonies: vec![0.60, 0.12, 0.28],
            prev_offense_type: vec![0.20, 0.22, 0.08, 0.08, 0.16, 0.14, 0.04, 0.08],
            sex: vec![0.78, 0.22],
            ethnicity: vec![0.20, 0.80],
            drug_abuse: vec![0.58, 0.12, 0.30],
            race: vec![0.30, 0.36, 0.02, 0.16, 0.16],
            supervision: vec![0.36, 0.04, 0.28, 0.02, 0.15, 0.15],
        }
    }
}

impl CovariateMarginals {
    pub fn get(&self, covariate: Covariate) -> &[f64] {
        match covariate {
            Covariate::Employment => &self.employment,
            Covariate::AgeCategory => &self.age_category,
            Covariate::PriorFelonies => &self.prior_felonies,
            Covariate::PrevOffenseType => &self.prev_offense_type,
            Covariate::Sex => &self.sex,
            Covariate::Ethnicity => &self.ethnicity,
            Covariate::DrugAbuse => &self.drug_abuse,
            Covariate::Race => &self.race,
            Covariate::Supervision => &self.supervision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for covariate in Covariate::ALL {
            let weights = self.get(covariate);
            if weights.len() != covariate.level_count() as usize {
                return Err(Error::Config(format!(
                    "{}: expected {} marginal weights, got {}",
                    covariate.name(),
                    covariate.level_count(),
                    weights.len()
                )));
            }
            weight_sum(weights)
                .map_err(|e| Error::Config(format!("{}: {e}", covariate.name())))?;
        }
        Ok(())
    }
}

/// Parameters for the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCohortSpec {
    pub size: usize,
    pub seed: u64,
    /// Target mean probation term, days.
    pub term_mean_days: f64,
    /// Log-space standard deviation of the term distribution.
    pub term_log_sigma: f64,
    pub term_min_days: f64,
    pub term_max_days: f64,
    pub marginals: CovariateMarginals,
    pub age_bounds: AgeBounds,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            size: 1000,
            seed: 0x5eed_0001,
            term_mean_days: 1375.0,
            term_log_sigma: 0.5,
            term_min_days: 30.0,
            term_max_days: 4320.0,
            marginals: CovariateMarginals::default(),
            age_bounds: AgeBounds::default(),
        }
    }
}

/// Draw an independent-marginal cohort: categorical levels per the
/// marginals, ages uniform within category, probation terms log-normal with
/// the requested mean, clipped to the configured range. Weights are uniform.
pub fn synthesize_cohort(spec: &SyntheticCohortSpec) -> Result<CovariateDistribution> {
    if spec.size == 0 {
        return Err(Error::Config("synthetic cohort size must be positive".into()));
    }
    spec.marginals.validate()?;
    spec.age_bounds.validate()?;
    if !(spec.term_mean_days > 0.0
        && spec.term_log_sigma >= 0.0
        && spec.term_min_days > 0.0
        && spec.term_min_days <= spec.term_max_days)
    {
        return Err(Error::Config("invalid synthetic term parameters".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let log_mean = spec.term_mean_days.ln() - 0.5 * spec.term_log_sigma * spec.term_log_sigma;
    let mut support = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let mut levels = [0u8; 9];
        for covariate in Covariate::ALL {
            levels[covariate.index()] = sample_level(spec.marginals.get(covariate), &mut rng);
        }
        let age_category = levels[Covariate::AgeCategory.index()];
        let (lo, hi) = spec.age_bounds.category_range(age_category)?;
        let age_years = lo + (hi - lo) * rng.gen::<f64>();
        let z = standard_normal(&mut rng);
        let term = (log_mean + spec.term_log_sigma * z)
            .exp()
            .clamp(spec.term_min_days, spec.term_max_days);
        support.push(CovariateProfile {
            employment: levels[Covariate::Employment.index()],
            age_category,
            prior_felonies: levels[Covariate::PriorFelonies.index()],
            prev_offense_type: levels[Covariate::PrevOffenseType.index()],
            sex: levels[Covariate::Sex.index()],
            ethnicity: levels[Covariate::Ethnicity.index()],
            drug_abuse: levels[Covariate::DrugAbuse.index()],
            race: levels[Covariate::Race.index()],
            supervision: levels[Covariate::Supervision.index()],
            age_years,
            probation_term_days: term,
        });
    }
    CovariateDistribution::uniform(support, spec.age_bounds)
}

fn sample_level<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> u8 {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (index, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return (index + 1) as u8;
        }
    }
    weights.len() as u8
}

/// Box–Muller standard normal (no extra dependency needed for one draw).
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= 0.0 {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_profile() -> CovariateProfile {
        CovariateProfile {
            employment: 1,
            age_category: 1,
            prior_felonies: 1,
            prev_offense_type: 1,
            sex: 1,
            ethnicity: 1,
            drug_abuse: 1,
            race: 1,
            supervision: 1,
            age_years: 18.0,
            probation_term_days: 1375.0,
        }
    }

    fn profile_with_age(age_years: f64, term: f64) -> CovariateProfile {
        let mut p = reference_profile();
        p.age_years = age_years;
        p.age_category = age_category_from_years(age_years);
        p.probation_term_days = term;
        p
    }

    #[test]
    fn age_categories_follow_the_published_cutoffs() {
        assert_eq!(age_category_from_years(16.0), 1);
        assert_eq!(age_category_from_years(19.999), 1);
        assert_eq!(age_category_from_years(20.0), 2);
        assert_eq!(age_category_from_years(24.999), 2);
        assert_eq!(age_category_from_years(25.0), 3);
        assert_eq!(age_category_from_years(30.0), 4);
        assert_eq!(age_category_from_years(39.999), 4);
        assert_eq!(age_category_from_years(40.0), 5);
        assert_eq!(age_category_from_years(50.0), 6);
        assert_eq!(age_category_from_years(64.0), 6);
    }

    #[test]
    fn level_domains_are_enforced() {
        let mut p = reference_profile();
        p.supervision = 7;
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("supervision: level 7 outside [1,6]"), "{err}");
    }

    #[test]
    fn single_profile_support_always_samples_that_profile() {
        let p = profile_with_age(22.0, 900.0);
        let dist = CovariateDistribution::uniform(vec![p.clone()], AgeBounds::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = dist.sample_profile(&mut rng);
            assert_eq!(s.employment, p.employment);
            assert_eq!(s.age_category, p.age_category);
            assert_eq!(s.probation_term_days, p.probation_term_days);
            assert!((20.0..25.0).contains(&s.age_years));
        }
    }

    #[test]
    fn uniform_weights_match_multinomial_frequencies() {
        let n_profiles = 8usize;
        let support: Vec<CovariateProfile> = (0..n_profiles)
            .map(|k| profile_with_age(20.0 + k as f64, 500.0 + k as f64))
            .collect();
        let dist = CovariateDistribution::uniform(support, AgeBounds::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let draws = 100_000usize;
        let mut counts = vec![0usize; n_profiles];
        for _ in 0..draws {
            let s = dist.sample_profile(&mut rng);
            let k = (s.probation_term_days - 500.0) as usize;
            counts[k] += 1;
        }
        let p = 1.0 / n_profiles as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for &count in &counts {
            let freq = count as f64 / draws as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "frequency {freq} deviates from {p} by more than 3σ ({sigma})"
            );
        }
    }

    #[test]
    fn younger_reweighting_matches_hand_arithmetic() {
        let weights = younger_weights(&[20.0, 60.0]).unwrap();
        assert!((weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((weights[1] - 1.0 / 3.0).abs() < 1e-12);

        let mut dist = CovariateDistribution::uniform(
            vec![profile_with_age(20.0, 100.0), profile_with_age(60.0, 100.0)],
            AgeBounds::default(),
        )
        .unwrap();
        dist.reweight_younger().unwrap();
        assert!((dist.weights()[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn update_dynamics_ages_exactly_and_counts_offenses() {
        let mut i = Individual::new(7, profile_with_age(30.0, 1375.0), 100.0, 1375.0, 1000.0, RiskGroup::Low);
        assert_eq!(i.exit_time, 100.0 + 1375.0 + 1000.0);

        i.update_dynamics(100.0, false).unwrap();
        assert_eq!(i.age_days, i.initial_age_days);
        assert_eq!(i.offense_count, 0);

        i.update_dynamics(465.25, true).unwrap();
        assert_eq!(i.age_days, i.initial_age_days + 365.25);
        assert_eq!(i.offense_count, 1);

        i.update_dynamics(500.0, false).unwrap();
        assert_eq!(i.offense_count, 1);

        assert!(matches!(i.update_dynamics(50.0, false), Err(Error::Ordering(_))));
    }

    #[test]
    fn reentry_restarts_the_age_baseline_and_keeps_history() {
        let mut i = Individual::new(3, profile_with_age(25.0, 800.0), 0.0, 800.0, 200.0, RiskGroup::High);
        i.treated = true;
        i.update_dynamics(900.0, true).unwrap();
        i.off_probation = true;
        let age_at_return = i.age_days;
        i.return_count += 1;
        i.reenter(900.0, 600.0, 300.0);
        assert_eq!(i.arrival_time, 900.0);
        assert_eq!(i.initial_age_days, age_at_return);
        assert_eq!(i.exit_time, 900.0 + 600.0 + 300.0);
        assert!(i.on_probation());
        assert!(i.treated, "treatment persists across returns by default");
        assert_eq!(i.offense_count, 1);
    }

    #[test]
    fn classification_uses_the_midpoint_median_with_ties_high() {
        let scores = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(classify_risk_group(&scores, 4.0).unwrap(), RiskGroup::High);
        assert_eq!(classify_risk_group(&scores, 1.0).unwrap(), RiskGroup::Low);
        assert_eq!(classify_risk_group(&scores, 2.5).unwrap(), RiskGroup::High);
        assert!(classify_risk_group(&[], 0.0).is_err());
    }

    #[test]
    fn classification_agrees_with_brute_force_top_half_split() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..100).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let high_count = scores
            .iter()
            .filter(|s| classify_risk_group(&scores, **s).unwrap() == RiskGroup::High)
            .count();
        assert_eq!(high_count, 50, "continuous scores split evenly at the median");
        // Everyone in the top half sorted order is High, bottom half Low.
        for (rank, s) in sorted.iter().enumerate() {
            let expected = if rank >= 50 { RiskGroup::High } else { RiskGroup::Low };
            assert_eq!(classify_risk_group(&scores, *s).unwrap(), expected, "rank {rank}");
        }
    }

    #[test]
    fn csv_weights_renormalize_with_a_warning() {
        let csv = "employment,age_category,prior_felonies,prev_offense_type,sex,ethnicity,drug_abuse,race,supervision,age_years,probation_term_days,weight\n\
                   1,2,1,1,1,1,1,1,1,21.0,900.0,0.49975\n\
                   1,3,1,1,1,1,1,1,1,26.0,900.0,0.49975\n";
        let (dist, warnings) =
            CovariateDistribution::from_csv_reader(csv.as_bytes(), AgeBounds::default()).unwrap();
        assert_eq!(warnings.len(), 1, "0.9995 total triggers a renormalization warning");
        assert!((dist.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_rejects_out_of_domain_levels_with_row_numbers() {
        let csv = "employment,age_category,prior_felonies,prev_offense_type,sex,ethnicity,drug_abuse,race,supervision,age_years,probation_term_days,weight\n\
                   1,2,1,1,1,1,1,1,7,21.0,900.0,1.0\n";
        let err = CovariateDistribution::from_csv_reader(csv.as_bytes(), AgeBounds::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("supervision: level 7 outside [1,6]"), "{err}");
    }

    #[test]
    fn csv_rejects_weight_sums_beyond_the_tolerance() {
        let csv = "employment,age_category,prior_felonies,prev_offense_type,sex,ethnicity,drug_abuse,race,supervision,age_years,probation_term_days,weight\n\
                   1,2,1,1,1,1,1,1,1,21.0,900.0,0.6\n\
                   1,3,1,1,1,1,1,1,1,26.0,900.0,0.6\n";
        assert!(CovariateDistribution::from_csv_reader(csv.as_bytes(), AgeBounds::default()).is_err());
    }

    #[test]
    fn synthetic_cohort_hits_the_target_mean_term() {
        let spec = SyntheticCohortSpec { size: 10_000, ..SyntheticCohortSpec::default() };
        let cohort = synthesize_cohort(&spec).unwrap();
        let mean: f64 = cohort.support().iter().map(|p| p.probation_term_days).sum::<f64>()
            / cohort.len() as f64;
        assert!(
            (mean - 1375.0).abs() < 0.05 * 1375.0,
            "synthetic mean term {mean} misses 1375 by more than 5%"
        );
        for p in cohort.support() {
            assert!((30.0..=4320.0).contains(&p.probation_term_days));
        }
    }

    #[test]
    fn bundled_cohort_matches_the_default_generator() {
        let bundled = CovariateDistribution::bundled();
        let generated = synthesize_cohort(&SyntheticCohortSpec::default()).unwrap();
        assert_eq!(bundled.len(), generated.len());
        for (b, g) in bundled.support().iter().zip(generated.support()) {
            assert_eq!(b, g, "bundled cohort drifted from the generator; regenerate the fixture");
        }
    }

    /// Regenerates the bundled cohort fixture. Run manually after changing
    /// the generator defaults: `cargo test -p diversim-core regenerate_bundled -- --ignored`.
    #[test]
    #[ignore]
    fn regenerate_bundled_cohort() {
        let cohort = synthesize_cohort(&SyntheticCohortSpec::default()).unwrap();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/cohort_default.csv");
        let mut writer = csv::Writer::from_path(path).unwrap();
        writer
            .write_record([
                "employment",
                "age_category",
                "prior_felonies",
                "prev_offense_type",
                "sex",
                "ethnicity",
                "drug_abuse",
                "race",
                "supervision",
                "age_years",
                "probation_term_days",
                "weight",
            ])
            .unwrap();
        let weight = 1.0 / cohort.len() as f64;
        for p in cohort.support() {
            writer
                .write_record([
                    p.employment.to_string(),
                    p.age_category.to_string(),
                    p.prior_felonies.to_string(),
                    p.prev_offense_type.to_string(),
                    p.sex.to_string(),
                    p.ethnicity.to_string(),
                    p.drug_abuse.to_string(),
                    p.race.to_string(),
                    p.supervision.to_string(),
                    p.age_years.to_string(),
                    p.probation_term_days.to_string(),
                    weight.to_string(),
                ])
                .unwrap();
        }
        writer.flush().unwrap();
    }

    proptest! {
        #[test]
        fn sampled_profiles_are_always_valid(seed in 0u64..1000) {
            let spec = SyntheticCohortSpec { size: 50, seed, ..SyntheticCohortSpec::default() };
            let cohort = synthesize_cohort(&spec).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
            for _ in 0..20 {
                let p = cohort.sample_profile(&mut rng);
                prop_assert!(p.validate().is_ok());
                let (lo, hi) = cohort.age_bounds().category_range(p.age_category).unwrap();
                prop_assert!(p.age_years >= lo && p.age_years < hi);
            }
        }

        #[test]
        fn median_splits_random_score_sets(scores in proptest::collection::vec(-3.0..3.0f64, 1..200)) {
            let median = risk_median(&scores).unwrap();
            let high = scores.iter().filter(|s| **s >= median).count();
            let low = scores.len() - high;
            // The midpoint median can't leave more than half strictly below it.
            prop_assert!(low <= scores.len() / 2 + scores.len() % 2);
            prop_assert!(high >= scores.len() / 2);
        }
    }
}
