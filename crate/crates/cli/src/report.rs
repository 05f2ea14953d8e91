//! Episode-level CSV I/O and the aggregate table: per-policy window means
//! with 95% confidence intervals and paired deltas against the null policy.
//!
//! The per-episode schema is fixed — one row per (replication, policy,
//! episode) with the columns `replication, policy, episode, population,
//! offenses, incarcerations, completions, enrollment, mu, arrivals,
//! returns` — so downstream tools can rely on it. The aggregate table has
//! one row per (grid point, policy, window); a `~0` mark flags deltas whose
//! interval straddles zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use diversim_core::engine::Snapshot;
use diversim_core::metrics::{
    mean_and_ci, relative_to_null, window_metrics, DeltaCi, EpisodeMetrics, MetricDeltas, Window,
};
use diversim_core::policy::PolicyKind;

use crate::error::{Error, Result};
use crate::runner::{Failure, EPISODES_DIR, AGGREGATE_FILE};
use crate::scenario::{beta_label, GridPoint, Scenario};

/// One per-episode CSV row. Field order is the on-disk column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub replication: u32,
    pub policy: String,
    pub episode: u32,
    pub population: u32,
    pub offenses: u32,
    pub incarcerations: u32,
    pub completions: u32,
    pub enrollment: u32,
    pub mu: f64,
    pub arrivals: u32,
    pub returns: u32,
}

impl EpisodeRow {
    pub fn from_snapshot(replication: u32, policy: &str, s: &Snapshot) -> Self {
        EpisodeRow {
            replication,
            policy: policy.to_string(),
            episode: s.episode,
            population: s.population,
            offenses: s.offenses,
            incarcerations: s.incarcerations,
            completions: s.completions,
            enrollment: s.enrollment,
            mu: s.mu,
            arrivals: s.arrivals,
            returns: s.returns,
        }
    }

    pub fn to_snapshot(&self) -> Snapshot {
        Snapshot {
            episode: self.episode,
            population: self.population,
            offenses: self.offenses,
            enrollment: self.enrollment,
            mu: self.mu,
            incarcerations: self.incarcerations,
            completions: self.completions,
            arrivals: self.arrivals,
            returns: self.returns,
        }
    }
}

/// Serialize episode rows to CSV bytes (header included).
pub fn episode_csv_bytes(rows: &[EpisodeRow]) -> Result<Vec<u8>> {
    to_csv_bytes(rows)
}

/// Serialize failure records to CSV bytes (header included).
pub fn failures_csv_bytes(rows: &[Failure]) -> Result<Vec<u8>> {
    to_csv_bytes(rows)
}

fn to_csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::Output(format!("csv buffer flush failed: {e}")))
}

/// Read an episode CSV back into trajectories keyed by (policy, replication).
pub fn read_trajectories(
    path: &Path,
) -> Result<BTreeMap<(PolicyKind, u32), Vec<Snapshot>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<(PolicyKind, u32), Vec<Snapshot>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: EpisodeRow = row?;
        let policy = PolicyKind::from_str(&row.policy).map_err(|e| {
            Error::Output(format!("{}: unknown policy {:?}: {e}", path.display(), row.policy))
        })?;
        out.entry((policy, row.replication)).or_default().push(row.to_snapshot());
    }
    if out.is_empty() {
        return Err(Error::Output(format!("{}: no trajectories", path.display())));
    }
    let lengths: Vec<usize> = out.values().map(Vec::len).collect();
    if lengths.iter().any(|&l| l != lengths[0]) {
        return Err(Error::Output(format!(
            "{}: trajectories have mixed lengths",
            path.display()
        )));
    }
    Ok(out)
}

/// One aggregate row: a (grid point, policy, window) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub point: String,
    pub policy: String,
    pub window: String,
    pub replications: usize,
    pub delta_inc: f64,
    pub off_mean_days: f64,
    pub beta: String,
    pub arrival_mean_days: f64,
    pub capacity: u32,
    pub cohort: String,
    pub offenses_per_capita: f64,
    pub offenses_hw: f64,
    pub incarcerations_per_capita: f64,
    pub incarcerations_hw: f64,
    pub completions_per_capita: f64,
    pub completions_hw: f64,
    pub population_mean: f64,
    pub population_hw: f64,
    pub enrollment_mean: f64,
    pub mu_mean: f64,
    pub d_offenses: f64,
    pub d_offenses_hw: f64,
    pub d_offenses_mark: String,
    pub d_incarcerations: f64,
    pub d_incarcerations_hw: f64,
    pub d_incarcerations_mark: String,
    pub d_completions: f64,
    pub d_completions_hw: f64,
    pub d_completions_mark: String,
    pub d_population: f64,
    pub d_population_hw: f64,
    pub d_population_mark: String,
}

/// Mean and CI that degrades to a zero half-width at a single replication
/// (no interval is estimable from one value).
fn ci(values: &[f64]) -> DeltaCi {
    if values.len() == 1 {
        DeltaCi { mean: values[0], half_width: 0.0 }
    } else {
        mean_and_ci(values).expect("n ≥ 2 checked")
    }
}

/// Paired deltas that degrade the same way at a single replication.
fn paired_deltas(policy: &[EpisodeMetrics], null: &[EpisodeMetrics]) -> Result<MetricDeltas> {
    if policy.len() == 1 {
        let d = |f: fn(&EpisodeMetrics) -> f64| DeltaCi {
            mean: f(&policy[0]) - f(&null[0]),
            half_width: 0.0,
        };
        return Ok(MetricDeltas {
            offenses: d(|m| m.offenses_per_capita),
            incarcerations: d(|m| m.incarcerations_per_capita),
            completions: d(|m| m.completions_per_capita),
            population: d(|m| m.population),
        });
    }
    relative_to_null(policy, null, true).map_err(Error::Simulation)
}

/// The aggregate table for every completed point, plus the slugs of points
/// whose episode file is missing (failed or not yet run).
pub struct AggregateOutcome {
    pub rows: Vec<AggregateRow>,
    pub missing: Vec<String>,
}

/// Build the aggregate rows for one grid point from its trajectories.
fn aggregate_point(
    scenario: &Scenario,
    point: &GridPoint,
    trajectories: &BTreeMap<(PolicyKind, u32), Vec<Snapshot>>,
) -> Result<Vec<AggregateRow>> {
    let episodes = trajectories.values().next().map_or(0, Vec::len);

    // Window metrics per policy, replication-ordered for pairing.
    let mut per_window: BTreeMap<(Window, PolicyKind), Vec<EpisodeMetrics>> = BTreeMap::new();
    for window in Window::BOTH {
        if window.episodes() > episodes {
            continue; // run too short for this window
        }
        for ((policy, _rep), snapshots) in trajectories {
            per_window
                .entry((window, *policy))
                .or_default()
                .push(window_metrics(snapshots, window).map_err(Error::Simulation)?);
        }
    }

    let mut rows = Vec::new();
    for window in Window::BOTH {
        let Some(null_metrics) = per_window.get(&(window, PolicyKind::Null)) else {
            continue;
        };
        let null_metrics = null_metrics.clone();
        for &policy in &scenario.policies {
            let Some(metrics) = per_window.get(&(window, policy)) else {
                return Err(Error::Output(format!(
                    "point {} has no trajectories for policy {policy}",
                    point.slug()
                )));
            };
            if metrics.len() != null_metrics.len() {
                return Err(Error::Output(format!(
                    "point {} policy {policy}: {} replications vs {} for null",
                    point.slug(),
                    metrics.len(),
                    null_metrics.len()
                )));
            }
            let field = |f: fn(&EpisodeMetrics) -> f64| -> Vec<f64> {
                metrics.iter().map(f).collect()
            };
            let offenses = ci(&field(|m| m.offenses_per_capita));
            let incarcerations = ci(&field(|m| m.incarcerations_per_capita));
            let completions = ci(&field(|m| m.completions_per_capita));
            let population = ci(&field(|m| m.population));
            let enrollment = ci(&field(|m| m.enrollment));
            let mu = ci(&field(|m| m.mu));
            let deltas = paired_deltas(metrics, &null_metrics)?;
            rows.push(AggregateRow {
                scenario: scenario.name.clone(),
                point: point.slug(),
                policy: policy.as_str().to_string(),
                window: window.as_str().to_string(),
                replications: metrics.len(),
                delta_inc: point.delta_inc,
                off_mean_days: point.off_mean_days,
                beta: beta_label(&point.beta),
                arrival_mean_days: point.arrival_mean_days,
                capacity: point.capacity,
                cohort: point.cohort.as_str().to_string(),
                offenses_per_capita: offenses.mean,
                offenses_hw: offenses.half_width,
                incarcerations_per_capita: incarcerations.mean,
                incarcerations_hw: incarcerations.half_width,
                completions_per_capita: completions.mean,
                completions_hw: completions.half_width,
                population_mean: population.mean,
                population_hw: population.half_width,
                enrollment_mean: enrollment.mean,
                mu_mean: mu.mean,
                d_offenses: deltas.offenses.mean,
                d_offenses_hw: deltas.offenses.half_width,
                d_offenses_mark: deltas.offenses.marker().to_string(),
                d_incarcerations: deltas.incarcerations.mean,
                d_incarcerations_hw: deltas.incarcerations.half_width,
                d_incarcerations_mark: deltas.incarcerations.marker().to_string(),
                d_completions: deltas.completions.mean,
                d_completions_hw: deltas.completions.half_width,
                d_completions_mark: deltas.completions.marker().to_string(),
                d_population: deltas.population.mean,
                d_population_hw: deltas.population.half_width,
                d_population_mark: deltas.population.marker().to_string(),
            });
        }
    }
    Ok(rows)
}

/// Compute the aggregate table from the episode files on disk.
pub fn aggregate_from_disk(
    output_dir: &Path,
    scenario: &Scenario,
    points: &[GridPoint],
) -> Result<AggregateOutcome> {
    let stem = scenario.file_stem();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    // Row order: window-major within each point so short/long cells for one
    // point sit together, points in index order.
    for point in points {
        let slug = point.slug();
        let path = output_dir.join(EPISODES_DIR).join(format!("{stem}-{slug}.csv"));
        if !path.exists() {
            missing.push(slug);
            continue;
        }
        let trajectories = read_trajectories(&path)?;
        rows.extend(aggregate_point(scenario, point, &trajectories)?);
    }
    Ok(AggregateOutcome { rows, missing })
}

/// Rebuild `aggregate.csv` from disk and return what was written.
pub fn write_aggregate(
    output_dir: &Path,
    scenario: &Scenario,
    points: &[GridPoint],
) -> Result<AggregateOutcome> {
    let outcome = aggregate_from_disk(output_dir, scenario, points)?;
    let bytes = to_csv_bytes(&outcome.rows)?;
    crate::runner::write_atomic(&output_dir.join(AGGREGATE_FILE), &bytes)?;
    Ok(outcome)
}

/// Fixed-width console rendering of aggregate rows (optionally one window).
pub fn render_table(rows: &[AggregateRow], window: Option<Window>) -> String {
    let mut out = String::new();
    let rows: Vec<&AggregateRow> = rows
        .iter()
        .filter(|r| window.is_none_or(|w| r.window == w.as_str()))
        .collect();
    if rows.is_empty() {
        out.push_str("no aggregate rows\n");
        return out;
    }
    out.push_str(&format!(
        "{:<6} {:<7} {:<22} {:<6} {:>12} {:>22} {:>22}\n",
        "point", "window", "policy", "reps", "offenses/cap", "Δoffenses ±95%", "Δincarcer. ±95%",
    ));
    for r in rows {
        let mark = if r.d_offenses_mark.is_empty() { "" } else { " ~0" };
        out.push_str(&format!(
            "{:<6} {:<7} {:<22} {:>6} {:>12.5} {:>13.5} ±{:<8.5}{} {:>11.5} ±{:<8.5}\n",
            r.point,
            r.window,
            r.policy,
            r.replications,
            r.offenses_per_capita,
            r.d_offenses,
            r.d_offenses_hw,
            mark,
            r.d_incarcerations,
            r.d_incarcerations_hw,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot(episode: u32, offenses: u32, population: u32) -> Snapshot {
        Snapshot {
            episode,
            population,
            offenses,
            enrollment: 3,
            mu: offenses as f64 / population.max(1) as f64,
            incarcerations: 1,
            completions: 2,
            arrivals: 4,
            returns: 0,
        }
    }

    #[test]
    fn episode_rows_round_trip_through_csv() {
        let rows: Vec<EpisodeRow> = (1..=3)
            .map(|e| EpisodeRow::from_snapshot(7, "high-risk", &snapshot(e, 5 * e, 40)))
            .collect();
        let bytes = episode_csv_bytes(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(
            "replication,policy,episode,population,offenses,incarcerations,completions,\
             enrollment,mu,arrivals,returns\n"
        ));
        let mut reader = csv::Reader::from_reader(&bytes[..]);
        let back: Vec<EpisodeRow> =
            reader.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows, back);
        assert_eq!(back[1].to_snapshot(), snapshot(2, 10, 40));
    }

    #[test]
    fn single_replication_degrades_to_zero_half_width() {
        assert_eq!(ci(&[0.4]), DeltaCi { mean: 0.4, half_width: 0.0 });
        let m = [EpisodeMetrics::from_snapshot(&snapshot(1, 8, 40))];
        let n = [EpisodeMetrics::from_snapshot(&snapshot(1, 10, 40))];
        let d = paired_deltas(&m, &n).unwrap();
        assert!((d.offenses.mean - (8.0 - 10.0) / 40.0).abs() < 1e-12);
        assert_eq!(d.offenses.half_width, 0.0);
    }
}
