//! Trajectory aggregation: per-episode rates, reporting windows, paired
//! deltas against the null policy, and the stringency crossing point.

use serde::{Deserialize, Serialize};

use crate::engine::Snapshot;
use crate::error::{Error, Result};

/// Episodes in the transient window (the first ones after t=0).
pub const SHORT_WINDOW_EPISODES: usize = 30;
/// Episodes in the steady-state window (the last ones before the horizon).
pub const LONG_WINDOW_EPISODES: usize = 20;
/// Episodes examined by the stationarity diagnostic.
pub const TREND_EPISODES: usize = 100;

/// z for a normal-approximation 95% confidence interval.
const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// First 30 episodes: transient behavior while the community fills.
    Short,
    /// Final 20 episodes: behavior once the system has settled.
    Long,
}

impl Window {
    pub const BOTH: [Window; 2] = [Window::Short, Window::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            Window::Short => "short",
            Window::Long => "long",
        }
    }

    pub fn episodes(self) -> usize {
        match self {
            Window::Short => SHORT_WINDOW_EPISODES,
            Window::Long => LONG_WINDOW_EPISODES,
        }
    }

    /// The window's slice of a snapshot trajectory.
    pub fn slice(self, snapshots: &[Snapshot]) -> Result<&[Snapshot]> {
        let needed = self.episodes();
        if snapshots.len() < needed {
            return Err(Error::Metrics(format!(
                "trajectory has {} episodes; the {} window needs {needed}",
                snapshots.len(),
                self.as_str()
            )));
        }
        Ok(match self {
            Window::Short => &snapshots[..needed],
            Window::Long => &snapshots[snapshots.len() - needed..],
        })
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// count / max(population, 1).
pub fn per_capita(count: u32, population: u32) -> f64 {
    f64::from(count) / f64::from(population.max(1))
}

/// One episode's (or one window's averaged) rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub offenses_per_capita: f64,
    pub incarcerations_per_capita: f64,
    pub completions_per_capita: f64,
    pub population: f64,
    pub enrollment: f64,
    pub mu: f64,
}

impl EpisodeMetrics {
    pub fn from_snapshot(snapshot: &Snapshot) -> Self {
        Self {
            offenses_per_capita: per_capita(snapshot.offenses, snapshot.population),
            incarcerations_per_capita: per_capita(snapshot.incarcerations, snapshot.population),
            completions_per_capita: per_capita(snapshot.completions, snapshot.population),
            population: f64::from(snapshot.population),
            enrollment: f64::from(snapshot.enrollment),
            mu: snapshot.mu,
        }
    }

    fn zero() -> Self {
        Self {
            offenses_per_capita: 0.0,
            incarcerations_per_capita: 0.0,
            completions_per_capita: 0.0,
            population: 0.0,
            enrollment: 0.0,
            mu: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.offenses_per_capita += other.offenses_per_capita;
        self.incarcerations_per_capita += other.incarcerations_per_capita;
        self.completions_per_capita += other.completions_per_capita;
        self.population += other.population;
        self.enrollment += other.enrollment;
        self.mu += other.mu;
    }

    fn scale(&mut self, factor: f64) {
        self.offenses_per_capita *= factor;
        self.incarcerations_per_capita *= factor;
        self.completions_per_capita *= factor;
        self.population *= factor;
        self.enrollment *= factor;
        self.mu *= factor;
    }
}

/// Average the per-episode metrics over one reporting window.
pub fn window_metrics(snapshots: &[Snapshot], window: Window) -> Result<EpisodeMetrics> {
    let slice = window.slice(snapshots)?;
    let mut total = EpisodeMetrics::zero();
    for snapshot in slice {
        total.add(&EpisodeMetrics::from_snapshot(snapshot));
    }
    total.scale(1.0 / slice.len() as f64);
    Ok(total)
}

/// A mean with its 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCi {
    pub mean: f64,
    pub half_width: f64,
}

impl DeltaCi {
    /// The interval excludes 0 — the effect direction is resolved.
    pub fn significant(&self) -> bool {
        self.mean.abs() > self.half_width
    }

    /// Table marker: blank when resolved, "~0" when the CI straddles zero.
    pub fn marker(&self) -> &'static str {
        if self.significant() {
            ""
        } else {
            "~0"
        }
    }

    pub fn low(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn high(&self) -> f64 {
        self.mean + self.half_width
    }
}

/// Sample mean and 95% CI half-width (needs ≥ 2 values).
pub fn mean_and_ci(values: &[f64]) -> Result<DeltaCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Metrics(format!(
            "confidence interval needs at least 2 replications, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(DeltaCi { mean, half_width: Z_95 * (var / n as f64).sqrt() })
}

/// Policy-minus-null deltas per metric (negative = improvement for offense,
/// incarceration, and population counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub offenses: DeltaCi,
    pub incarcerations: DeltaCi,
    pub completions: DeltaCi,
    pub population: DeltaCi,
}

fn delta_for(
    policy: &[EpisodeMetrics],
    null: &[EpisodeMetrics],
    paired: bool,
    field: fn(&EpisodeMetrics) -> f64,
) -> Result<DeltaCi> {
    if paired {
        let diffs: Vec<f64> =
            policy.iter().zip(null).map(|(p, n)| field(p) - field(n)).collect();
        mean_and_ci(&diffs)
    } else {
        let p = mean_and_ci(&policy.iter().map(field).collect::<Vec<_>>())?;
        let n = mean_and_ci(&null.iter().map(field).collect::<Vec<_>>())?;
        // Half-widths already embed z/√n, so variances add in squared form.
        Ok(DeltaCi {
            mean: p.mean - n.mean,
            half_width: p.half_width.hypot(n.half_width),
        })
    }
}

/// Per-replication window metrics compared against the null policy's, with
/// a 95% CI per metric. `paired` requires position-aligned replications
/// (common random numbers) and differences them one by one.
pub fn relative_to_null(
    policy: &[EpisodeMetrics],
    null: &[EpisodeMetrics],
    paired: bool,
) -> Result<MetricDeltas> {
    if paired && policy.len() != null.len() {
        return Err(Error::Metrics(format!(
            "paired comparison needs aligned replications; got {} policy vs {} null",
            policy.len(),
            null.len()
        )));
    }
    Ok(MetricDeltas {
        offenses: delta_for(policy, null, paired, |m| m.offenses_per_capita)?,
        incarcerations: delta_for(policy, null, paired, |m| m.incarcerations_per_capita)?,
        completions: delta_for(policy, null, paired, |m| m.completions_per_capita)?,
        population: delta_for(policy, null, paired, |m| m.population)?,
    })
}

/// One stringency grid point: (δ_inc, low-risk offense delta, high-risk
/// offense delta), deltas relative to null.
pub type CrossingPoint = (f64, f64, f64);

/// Smallest incarceration stringency at which prioritizing high-risk
/// individuals does at least as well as prioritizing low-risk ones, linearly
/// interpolated between bracketing grid points. `None` when the high-risk
/// policy never catches up on the grid.
pub fn regime_crossing(points: &[CrossingPoint]) -> Result<Option<f64>> {
    if points.len() < 3 {
        return Err(Error::Metrics(format!(
            "crossing search needs ≥ 3 grid points, got {}",
            points.len()
        )));
    }
    if points.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Metrics("crossing grid must be strictly ascending in δ".into()));
    }
    // g(δ) = high − low; the crossing is the first sign change to g ≤ 0.
    let gap = |p: &CrossingPoint| p.2 - p.1;
    for (k, point) in points.iter().enumerate() {
        let g = gap(point);
        if g <= 0.0 {
            if k == 0 {
                return Ok(Some(point.0));
            }
            let prev = &points[k - 1];
            let g_prev = gap(prev);
            let t = g_prev / (g_prev - g);
            return Ok(Some(prev.0 + t * (point.0 - prev.0)));
        }
    }
    Ok(None)
}

/// OLS slope diagnostic for the tail of a population trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendDiagnostic {
    pub slope: f64,
    pub t_stat: f64,
    pub episodes: usize,
}

impl TrendDiagnostic {
    /// |t| > 2: the tail still drifts — equilibrium-window metrics are
    /// questionable. A warning, not a gate.
    pub fn is_suspicious(&self) -> bool {
        self.t_stat.abs() > 2.0
    }
}

/// Least-squares slope (per episode) with its t statistic.
pub fn population_trend(values: &[f64]) -> Result<TrendDiagnostic> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Metrics(format!("trend test needs ≥ 3 episodes, got {n}")));
    }
    let nf = n as f64;
    let x_mean = (nf - 1.0) / 2.0;
    let y_mean = values.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, y) in values.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    let slope = sxy / sxx;
    let sse: f64 = values
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let fit = y_mean + slope * (i as f64 - x_mean);
            (y - fit).powi(2)
        })
        .sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t_stat = if se == 0.0 {
        if slope == 0.0 {
            0.0
        } else {
            f64::INFINITY * slope.signum()
        }
    } else {
        slope / se
    };
    Ok(TrendDiagnostic { slope, t_stat, episodes: n })
}

/// Trend diagnostic over the final `TREND_EPISODES` (or all, if fewer) of a
/// trajectory's population series.
pub fn stationarity_diagnostic(snapshots: &[Snapshot]) -> Result<TrendDiagnostic> {
    let start = snapshots.len().saturating_sub(TREND_EPISODES);
    let tail: Vec<f64> = snapshots[start..].iter().map(|s| f64::from(s.population)).collect();
    population_trend(&tail)
}
