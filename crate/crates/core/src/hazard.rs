//! Risk scores, baseline hazards, inverse-transform offense sampling, and
//! anchor-based calibration.
//!
//! An individual's reoffense times follow a proportional-hazards law:
//! survival S_i(s) = S₀(s)^{exp(h_i)} with S₀(s) = exp(−Λ₀(s)). The risk
//! score h_i combines scaled categorical coefficients, an arrest-count term,
//! the community mean offense rate, and a treatment effect. Λ₀ is a
//! piecewise-constant-rate cumulative hazard whose single-segment case is
//! exponential; the bundled default comes from an anchor: treatment must cut
//! the median individual's offense probability by a target fraction over a
//! fixed horizon.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{age_category_from_years, Covariate, CovariateProfile, RiskGroup};
use crate::{Days, DAYS_PER_YEAR};

/// Treatment-effect specification: one β for everyone, or per risk group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSpec {
    Homogeneous { value: f64 },
    PerGroup { low: f64, high: f64 },
}

impl BetaSpec {
    pub fn homogeneous(value: f64) -> Self {
        BetaSpec::Homogeneous { value }
    }

    /// Hazard reduction applied to a treated member of `group`.
    pub fn effect(&self, group: RiskGroup) -> f64 {
        match (self, group) {
            (BetaSpec::Homogeneous { value }, _) => *value,
            (BetaSpec::PerGroup { low, .. }, RiskGroup::Low) => *low,
            (BetaSpec::PerGroup { high, .. }, RiskGroup::High) => *high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values = match self {
            BetaSpec::Homogeneous { value } => vec![*value],
            BetaSpec::PerGroup { low, high } => vec![*low, *high],
        };
        for v in values {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "treatment effect β must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Whether an individual is currently treated, and in which risk group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Treatment {
    Untreated,
    Treated(RiskGroup),
}

impl Treatment {
    pub fn from_flag(treated: bool, group: RiskGroup) -> Self {
        if treated {
            Treatment::Treated(group)
        } else {
            Treatment::Untreated
        }
    }
}

/// The fitted Cox coefficients plus the scale/arrest/feedback scalars and
/// the treatment-effect specification.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    arrests_coeff: f64,
    alpha0: f64,
    mu_coeff: f64,
    categorical: Vec<Vec<f64>>, // [Covariate::index][level - 1]
    beta: BetaSpec,
}

impl CoefficientTable {
    /// The published coefficient set shipped with the crate, with the
    /// homogeneous default treatment effect β = 0.342.
    pub fn bundled() -> Self {
        let raw = include_str!("../data/coefficients_default.csv");
        Self::from_csv_reader(raw.as_bytes()).expect("bundled coefficient table")
    }

    /// Parse a coefficient file: `covariate,level,coefficient` rows for the
    /// nine categoricals, plus scalar rows `arrests`, `original_risk_scale`,
    /// and `rearrest_rate` with an empty level column.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut categorical: Vec<Vec<Option<f64>>> = Covariate::ALL
            .iter()
            .map(|c| vec![None; c.level_count() as usize])
            .collect();
        let mut arrests_coeff = None;
        let mut alpha0 = None;
        let mut mu_coeff = None;
        for (index, record) in csv_reader.deserialize::<CoefficientRow>().enumerate() {
            let row_number = index + 2;
            let row = record.map_err(|e| Error::Ingestion(format!("row {row_number}: {e}")))?;
            if !row.coefficient.is_finite() {
                return Err(Error::Ingestion(format!(
                    "row {row_number}: coefficient must be finite"
                )));
            }
            match (Covariate::parse(&row.covariate), row.level) {
                (Some(covariate), Some(level)) => {
                    covariate
                        .check_level(level)
                        .map_err(|e| Error::Ingestion(format!("row {row_number}: {e}")))?;
                    let slot = &mut categorical[covariate.index()][level as usize - 1];
                    if slot.is_some() {
                        return Err(Error::Ingestion(format!(
                            "row {row_number}: duplicate coefficient for {covariate} level {level}"
                        )));
                    }
                    *slot = Some(row.coefficient);
                }
                (Some(covariate), None) => {
                    return Err(Error::Ingestion(format!(
                        "row {row_number}: {covariate} requires a level"
                    )));
                }
                (None, None) => {
                    let slot = match row.covariate.as_str() {
                        "arrests" => &mut arrests_coeff,
                        "original_risk_scale" => &mut alpha0,
                        "rearrest_rate" => &mut mu_coeff,
                        other => {
                            return Err(Error::Ingestion(format!(
                                "row {row_number}: unknown scalar '{other}'"
                            )))
                        }
                    };
                    if slot.is_some() {
                        return Err(Error::Ingestion(format!(
                            "row {row_number}: duplicate scalar '{}'",
                            row.covariate
                        )));
                    }
                    *slot = Some(row.coefficient);
                }
                (None, Some(_)) => {
                    return Err(Error::Ingestion(format!(
                        "row {row_number}: unknown covariate '{}'",
                        row.covariate
                    )));
                }
            }
        }
        let mut filled = Vec::with_capacity(categorical.len());
        for (covariate, levels) in Covariate::ALL.iter().zip(categorical) {
            let mut complete = Vec::with_capacity(levels.len());
            for (index, value) in levels.into_iter().enumerate() {
                complete.push(value.ok_or_else(|| {
                    Error::Ingestion(format!(
                        "missing coefficient for {covariate} level {}",
                        index + 1
                    ))
                })?);
            }
            filled.push(complete);
        }
        let table = Self {
            arrests_coeff: arrests_coeff
                .ok_or_else(|| Error::Ingestion("missing scalar 'arrests'".into()))?,
            alpha0: alpha0
                .ok_or_else(|| Error::Ingestion("missing scalar 'original_risk_scale'".into()))?,
            mu_coeff: mu_coeff
                .ok_or_else(|| Error::Ingestion("missing scalar 'rearrest_rate'".into()))?,
            categorical: filled,
            beta: BetaSpec::homogeneous(0.342),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Ingestion(format!("cannot open coefficient file {}: {e}", path.display()))
        })?;
        Self::from_csv_reader(file)
    }

    pub fn with_beta(mut self, beta: BetaSpec) -> Result<Self> {
        beta.validate()?;
        self.beta = beta;
        Ok(self)
    }

    pub fn beta(&self) -> BetaSpec {
        self.beta
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn arrests_coeff(&self) -> f64 {
        self.arrests_coeff
    }

    pub fn mu_coeff(&self) -> f64 {
        self.mu_coeff
    }

    pub fn coefficient(&self, covariate: Covariate, level: u8) -> Result<f64> {
        covariate.check_level(level)?;
        Ok(self.categorical[covariate.index()][level as usize - 1])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!(
                "risk scale must be positive and finite, got {}",
                self.alpha0
            )));
        }
        if !self.arrests_coeff.is_finite() || !self.mu_coeff.is_finite() {
            return Err(Error::Config("arrest and feedback coefficients must be finite".into()));
        }
        for covariate in Covariate::ALL {
            let levels = &self.categorical[covariate.index()];
            if levels[0] != 0.0 {
                return Err(Error::Config(format!(
                    "{covariate}: level 1 is the reference level and must have coefficient 0, got {}",
                    levels[0]
                )));
            }
            if levels.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("{covariate}: coefficients must be finite")));
            }
        }
        self.beta.validate()
    }
}

#[derive(Debug, Deserialize)]
struct CoefficientRow {
    covariate: String,
    level: Option<u8>,
    coefficient: f64,
}

/// Additive breakdown of a risk score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskComponents {
    /// Scaled sum of the non-age categorical coefficients.
    pub static_covariates: f64,
    /// Scaled coefficient of the current age category.
    pub dynamic_age: f64,
    /// Arrest-count term (θ₁ · j).
    pub dynamic_arrests: f64,
    /// Community feedback term (α₀ · μ-coefficient · μ).
    pub community_mu: f64,
    /// −β when treated, else 0.
    pub treatment: f64,
}

/// A log-relative-hazard h with its component breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskScore {
    pub value: f64,
    pub components: RiskComponents,
}

/// Compute h = α₀·(categoricals + μ-term) + θ₁·j − β·τ for one individual
/// at a given age, arrest count, and community rate.
pub fn compute_risk(
    table: &CoefficientTable,
    profile: &CovariateProfile,
    age_days: Days,
    offense_count: u32,
    mu: f64,
    treatment: Treatment,
) -> Result<RiskScore> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Domain(format!("mean offense rate must be ≥ 0, got {mu}")));
    }
    if !(age_days >= 0.0 && age_days.is_finite()) {
        return Err(Error::Domain(format!("age must be ≥ 0 days, got {age_days}")));
    }
    let mut static_sum = 0.0;
    for covariate in Covariate::ALL {
        if covariate == Covariate::AgeCategory {
            continue;
        }
        static_sum += table.coefficient(covariate, profile.level(covariate))?;
    }
    let age_category = age_category_from_years(age_days / DAYS_PER_YEAR);
    let components = RiskComponents {
        static_covariates: table.alpha0 * static_sum,
        dynamic_age: table.alpha0 * table.coefficient(Covariate::AgeCategory, age_category)?,
        dynamic_arrests: table.arrests_coeff * offense_count as f64,
        community_mu: table.alpha0 * table.mu_coeff * mu,
        treatment: match treatment {
            Treatment::Untreated => 0.0,
            Treatment::Treated(group) => -table.beta.effect(group),
        },
    };
    let value = components.static_covariates
        + components.dynamic_age
        + components.dynamic_arrests
        + components.community_mu
        + components.treatment;
    Ok(RiskScore { value, components })
}

/// Piecewise-constant-rate cumulative hazard Λ₀ with exact inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHazard {
    breakpoints: Vec<Days>,
    rates: Vec<f64>,
    cumulative_at: Vec<f64>, // Λ₀ at each breakpoint
}

impl BaselineHazard {
    /// Segments start at `breakpoints[k]` (the first must be 0) with hazard
    /// `rates[k]` per day; the last segment extends to infinity.
    pub fn new(breakpoints: Vec<Days>, rates: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != rates.len() {
            return Err(Error::Config(format!(
                "baseline hazard needs matching nonempty breakpoints and rates, got {} and {}",
                breakpoints.len(),
                rates.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::Config(format!(
                "baseline hazard must start at 0, got {}",
                breakpoints[0]
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0]) )
            || breakpoints.iter().any(|b| !b.is_finite())
        {
            return Err(Error::Config("baseline breakpoints must be strictly increasing".into()));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("baseline rates must be positive and finite".into()));
        }
        let mut cumulative_at = Vec::with_capacity(breakpoints.len());
        let mut acc = 0.0;
        for k in 0..breakpoints.len() {
            cumulative_at.push(acc);
            if k + 1 < breakpoints.len() {
                acc += rates[k] * (breakpoints[k + 1] - breakpoints[k]);
            }
        }
        Ok(Self { breakpoints, rates, cumulative_at })
    }

    /// Single-segment (exponential) baseline with constant rate per day.
    pub fn exponential(rate_per_day: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![rate_per_day])
    }

    pub fn breakpoints(&self) -> &[Days] {
        &self.breakpoints
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Λ₀(s): exact piecewise-linear accumulation.
    pub fn cumulative_hazard(&self, s: Days) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("cumulative hazard needs s ≥ 0, got {s}")));
        }
        let k = self.breakpoints.partition_point(|b| *b <= s) - 1;
        Ok(self.cumulative_at[k] + self.rates[k] * (s - self.breakpoints[k]))
    }

    /// Λ₀⁻¹(y): exact piecewise-linear inversion; right inverse of
    /// [`Self::cumulative_hazard`].
    pub fn inverse_cumulative_hazard(&self, y: f64) -> Result<Days> {
        if !(y >= 0.0) {
            return Err(Error::Domain(format!("inverse cumulative hazard needs y ≥ 0, got {y}")));
        }
        let k = self.cumulative_at.partition_point(|c| *c <= y) - 1;
        Ok(self.breakpoints[k] + (y - self.cumulative_at[k]) / self.rates[k])
    }

    /// S(s | h) = exp(−Λ₀(s)·e^h).
    pub fn survival(&self, s: Days, h: f64) -> Result<f64> {
        Ok((-self.cumulative_hazard(s)? * h.exp()).exp())
    }
}

/// 1 − S(horizon | h): probability of at least one offense by the horizon.
pub fn offense_probability(base: &BaselineHazard, h: f64, horizon: Days) -> Result<f64> {
    Ok(1.0 - base.survival(horizon, h)?)
}

/// Uniform draw from the open interval (0, 1); 0 is redrawn so the
/// inverse-transform sample is always finite and positive.
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Inverse-transform sample: T = Λ₀⁻¹(−ln(U)·e^{−h}) for a supplied U.
pub fn offense_time_from_uniform(base: &BaselineHazard, h: f64, u: f64) -> Result<Days> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw must lie in (0,1), got {u}")));
    }
    base.inverse_cumulative_hazard(-u.ln() * (-h).exp())
}

/// Draw T with Pr(T > s) = S₀(s)^{exp(h)}.
pub fn sample_offense_time<R: Rng + ?Sized>(base: &BaselineHazard, h: f64, rng: &mut R) -> Days {
    offense_time_from_uniform(base, h, open_unit(rng)).expect("u in (0,1) yields a valid time")
}

/// The calibration anchor: treatment with effect `beta` must reduce the
/// median-risk individual's offense probability over `horizon_days` by
/// `reduction` (e.g. 0.25 for a 25% cut).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchor {
    pub h_med: f64,
    pub beta: f64,
    pub horizon_days: Days,
    pub reduction: f64,
}

impl Default for CalibrationAnchor {
    fn default() -> Self {
        Self { h_med: -1.434, beta: 0.342, horizon_days: 730.0, reduction: 0.25 }
    }
}

/// Solve for the exponential baseline rate λ₀ matching the anchor:
/// 1 − exp(−x·e^{h−β}) = (1−r)·(1 − exp(−x·e^{h})) with x = λ₀·horizon,
/// by bisection to |residual| < 1e−12.
pub fn calibrate_baseline_from_anchor(anchor: &CalibrationAnchor) -> Result<BaselineHazard> {
    if !(anchor.reduction > 0.0 && anchor.reduction < 1.0) {
        return Err(Error::Domain(format!(
            "reduction must lie strictly between 0 and 1, got {}",
            anchor.reduction
        )));
    }
    if !(anchor.horizon_days > 0.0 && anchor.horizon_days.is_finite()) {
        return Err(Error::Domain(format!(
            "horizon must be positive, got {}",
            anchor.horizon_days
        )));
    }
    if !(anchor.h_med.is_finite() && anchor.beta.is_finite() && anchor.beta >= 0.0) {
        return Err(Error::Domain("anchor risk and β must be finite with β ≥ 0".into()));
    }
    let untreated_scale = anchor.h_med.exp();
    let treated_scale = (anchor.h_med - anchor.beta).exp();
    let keep = 1.0 - anchor.reduction;
    // Residual of the anchor equation at x = Λ₀(horizon).
    let residual =
        |x: f64| (-(-x * treated_scale).exp_m1()) - keep * (-(-x * untreated_scale).exp_m1());

    let mut lo = 1e-12;
    let mut hi = 1.0;
    let mut doublings = 0;
    while residual(hi) <= 0.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::Calibration(format!(
                "no sign change while expanding bracket: residual({lo:e}) = {:e}, residual({hi:e}) = {:e}; \
                 the anchor may be unreachable (β too small for the requested reduction)",
                residual(lo),
                residual(hi)
            )));
        }
    }
    if residual(lo) >= 0.0 {
        return Err(Error::Calibration(format!(
            "no root in bracket [{lo:e}, {hi:e}]: residuals {:e} and {:e}; \
             the anchor may be unreachable (β too small for the requested reduction)",
            residual(lo),
            residual(hi)
        )));
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..500 {
        let r = residual(x);
        if r.abs() < 1e-12 {
            break;
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let next = 0.5 * (lo + hi);
        if next == x {
            break;
        }
        x = next;
    }
    let final_residual = residual(x);
    if final_residual.abs() >= 1e-12 {
        return Err(Error::Calibration(format!(
            "bisection stalled at x = {x} with residual {final_residual:e}"
        )));
    }
    BaselineHazard::exponential(x / anchor.horizon_days)
}

/// Proportional-hazards effect β converting an untreated offense
/// probability into a treated one over the same horizon:
/// β = −ln( ln(1−p_treated) / ln(1−p_untreated) ).
pub fn derive_group_beta(p_untreated: f64, p_treated: f64) -> Result<f64> {
    if !(p_untreated > 0.0 && p_untreated < 1.0) {
        return Err(Error::Domain(format!(
            "untreated probability must lie in (0,1), got {p_untreated}"
        )));
    }
    if !(p_treated > 0.0 && p_treated <= p_untreated) {
        return Err(Error::Domain(format!(
            "treated probability must lie in (0, p_untreated]; treatment must not increase risk \
             (got treated {p_treated} vs untreated {p_untreated})"
        )));
    }
    Ok(-((1.0 - p_treated).ln() / (1.0 - p_untreated).ln()).ln())
}
