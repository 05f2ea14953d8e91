//! Scenario execution: dispatch the policy × grid-point × replication cube
//! to a worker pool, write per-point episode CSVs plus a manifest, and
//! finish with the aggregate table.
//!
//! Reproducibility contract: every random stream is derived by hashing
//! (scenario seed, replication, stream name, policy tag), so results are
//! independent of worker count and completion order, and a rerun from the
//! manifest is byte-identical. Arrival/covariate/term streams omit the
//! policy tag — policies at the same replication see the same people
//! arriving at the same times (common random numbers), which is what makes
//! paired deltas meaningful.
//!
//! Resume: a grid point's episode file is written atomically (staged then
//! renamed), so its presence proves completeness; rerunning a partially
//! finished output directory only executes the missing points.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use diversim_core::engine::{run_with_streams, Snapshot};
use diversim_core::hazard::{
    calibrate_baseline_from_anchor, BaselineHazard, CalibrationAnchor, CoefficientTable,
};
use diversim_core::metrics::stationarity_diagnostic;
use diversim_core::policy::PolicyKind;
use diversim_core::population::CovariateDistribution;
use diversim_core::seeds::StreamSeeds;

use crate::error::{Error, Result};
use crate::report::{self, EpisodeRow};
use crate::scenario::{beta_label, Cohort, GridPoint, Scenario};

pub const MANIFEST_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const EPISODES_DIR: &str = "episodes";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const FAILURES_FILE: &str = "failures.csv";

/// Options that shape one invocation of the runner without living in the
/// scenario file. Overrides are folded into the scenario before hashing, so
/// the manifest always describes exactly what ran.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 lets the pool pick the machine's parallelism.
    pub workers: usize,
    /// Replace the scenario's base seed.
    pub seed_override: Option<u64>,
    /// Replace the scenario's replication count.
    pub replications_override: Option<u32>,
    /// Restrict to these policies (the null policy is still included).
    pub policy_filter: Option<Vec<PolicyKind>>,
    /// Suppress per-point progress lines on stderr.
    pub quiet: bool,
}

/// One (grid point, policy, replication) unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct TaskKey {
    point: usize,
    policy_rank: usize,
    replication: u32,
}

/// A task that could not produce a trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub point: usize,
    pub slug: String,
    pub policy: String,
    pub replication: u32,
    pub error: String,
}

/// What `run_scenario` did, for logging and exit-status decisions.
#[derive(Debug)]
pub struct RunSummary {
    pub scenario: Scenario,
    pub output_dir: PathBuf,
    pub points_total: usize,
    pub points_executed: usize,
    pub points_resumed: usize,
    pub failures: Vec<Failure>,
    pub warnings: Vec<String>,
    pub aggregate_rows: usize,
}

impl RunSummary {
    pub fn all_points_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Reproducibility record written next to the result files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tool: String,
    pub core: String,
    /// SHA-256 of the canonical scenario serialization below.
    pub scenario_hash: String,
    /// How substream seeds derive from the base seed.
    pub seed_scheme: String,
    /// Where each grid point's trajectories live, relative to this file.
    pub episodes_pattern: String,
    pub scenario: Scenario,
    pub points: Vec<PointRecord>,
}

/// One grid point as run, with human-readable axis values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRecord {
    pub index: usize,
    pub slug: String,
    pub delta_inc: f64,
    pub off_mean_days: f64,
    pub beta: String,
    pub arrival_mean_days: f64,
    pub capacity: u32,
    pub cohort: String,
}

impl Manifest {
    pub fn new(scenario: &Scenario) -> Self {
        let points = scenario
            .points()
            .iter()
            .map(|p| PointRecord {
                index: p.index,
                slug: p.slug(),
                delta_inc: p.delta_inc,
                off_mean_days: p.off_mean_days,
                beta: beta_label(&p.beta),
                arrival_mean_days: p.arrival_mean_days,
                capacity: p.capacity,
                cohort: p.cohort.as_str().to_string(),
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT,
            tool: format!("diversim {}", env!("CARGO_PKG_VERSION")),
            core: format!("diversim-core {}", diversim_core::VERSION),
            scenario_hash: scenario.hash(),
            seed_scheme: "sha256(seed, replication, stream[, policy]); arrival/covariate/term \
                          streams shared across policies and grid points"
                .to_string(),
            episodes_pattern: format!("{EPISODES_DIR}/{}-{{point}}.csv", scenario.file_stem()),
            scenario: scenario.clone(),
            points,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Output(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Output(format!("{}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Output(format!(
                "{}: manifest format {} unsupported (expected {MANIFEST_FORMAT})",
                path.display(),
                manifest.format
            )));
        }
        Ok(manifest)
    }
}

/// Load either a scenario file or a manifest (re-run mode); manifests are
/// recognized by their `format` + embedded `[scenario]` table.
pub fn load_scenario_or_manifest(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(manifest) = toml::from_str::<Manifest>(&text) {
        let scenario = manifest.scenario;
        // Revalidate: the manifest may come from a foreign tool version.
        scenario.validate().map_err(|e| {
            Error::Scenario(format!("{}: embedded scenario invalid: {e}", path.display()))
        })?;
        return Ok(scenario);
    }
    Scenario::from_toml_str(&text)
        .map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))
}

/// The model assets every run shares: coefficient table, calibrated
/// baseline hazard, and one covariate distribution per cohort variant.
pub struct ModelAssets {
    pub table: CoefficientTable,
    pub baseline: BaselineHazard,
    distributions: BTreeMap<Cohort, Arc<CovariateDistribution>>,
}

impl ModelAssets {
    /// Build assets for a scenario: the bundled coefficient table and the
    /// anchor-calibrated exponential baseline.
    pub fn for_scenario(scenario: &Scenario) -> Result<Self> {
        let table = CoefficientTable::bundled();
        let baseline = calibrate_baseline_from_anchor(&CalibrationAnchor::default())?;
        let csv_path = scenario.cohort_csv.as_deref().map(Path::new);
        let mut cohorts: Vec<Cohort> = scenario
            .axes
            .cohort
            .clone()
            .unwrap_or_else(|| vec![scenario.cohort]);
        cohorts.sort();
        cohorts.dedup();
        let mut distributions = BTreeMap::new();
        for cohort in cohorts {
            distributions.insert(cohort, Arc::new(cohort.distribution(csv_path)?));
        }
        Ok(ModelAssets { table, baseline, distributions })
    }

    pub fn distribution(&self, cohort: Cohort) -> &CovariateDistribution {
        self.distributions
            .get(&cohort)
            .expect("every swept cohort is materialized at construction")
    }
}

/// Execute one (point, policy, replication) task and return its snapshots.
fn run_task(
    scenario: &Scenario,
    assets: &ModelAssets,
    point: &GridPoint,
    policy: PolicyKind,
    replication: u32,
) -> diversim_core::Result<Vec<Snapshot>> {
    let config = point.config(&scenario.config, scenario.policy(policy));
    let streams = StreamSeeds::paired(scenario.seed, replication, policy.as_str());
    let result = run_with_streams(
        &config,
        assets.distribution(point.cohort),
        &assets.table,
        &assets.baseline,
        streams,
    )?;
    debug_assert!(result.totals.conserved(), "conservation broke: {:?}", result.totals);
    Ok(result.snapshots)
}

/// Apply CLI overrides, producing the scenario that is actually run (and
/// hashed into the manifest).
pub fn resolve_overrides(mut scenario: Scenario, opts: &RunOptions) -> Result<Scenario> {
    if let Some(seed) = opts.seed_override {
        scenario.seed = seed;
    }
    if let Some(reps) = opts.replications_override {
        scenario.replications = reps;
    }
    if let Some(filter) = &opts.policy_filter {
        scenario.policies = PolicyKind::ALL
            .into_iter()
            .filter(|k| *k == PolicyKind::Null || filter.contains(k))
            .collect();
    }
    scenario.validate()?;
    Ok(scenario)
}

/// Atomically write `bytes` to `path` (stage in the same directory, rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn episodes_path(dir: &Path, scenario: &Scenario, slug: &str) -> PathBuf {
    dir.join(EPISODES_DIR).join(format!("{}-{slug}.csv", scenario.file_stem()))
}

/// Run a scenario into `output_dir`: execute missing grid points, then
/// (re)build the aggregate table from every completed point on disk.
pub fn run_scenario(
    scenario: Scenario,
    output_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    let scenario = resolve_overrides(scenario, opts)?;
    let assets = ModelAssets::for_scenario(&scenario)?;
    let points = scenario.points();

    fs::create_dir_all(output_dir.join(EPISODES_DIR))?;
    let manifest = Manifest::new(&scenario);
    let manifest_path = output_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let existing = Manifest::from_path(&manifest_path)?;
        if existing.scenario_hash != manifest.scenario_hash {
            return Err(Error::Output(format!(
                "{} already holds results for a different scenario \
                 (hash {} ≠ {}); use a fresh output directory",
                output_dir.display(),
                existing.scenario_hash,
                manifest.scenario_hash
            )));
        }
    }
    write_atomic(&manifest_path, manifest.to_toml().as_bytes())?;

    // A point whose episode file already exists is complete (atomic rename):
    // resume by running only the rest.
    let (resumed, to_run): (Vec<&GridPoint>, Vec<&GridPoint>) = points
        .iter()
        .partition(|p| episodes_path(output_dir, &scenario, &p.slug()).exists());

    let mut tasks: Vec<(TaskKey, &GridPoint, PolicyKind)> = Vec::new();
    for point in &to_run {
        for (rank, &policy) in scenario.policies.iter().enumerate() {
            for replication in 0..scenario.replications {
                tasks.push((
                    TaskKey { point: point.index, policy_rank: rank, replication },
                    point,
                    policy,
                ));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Output(format!("cannot build worker pool: {e}")))?;
    let mut results: Vec<(TaskKey, PolicyKind, diversim_core::Result<Vec<Snapshot>>)> =
        pool.install(|| {
            tasks
                .par_iter()
                .map(|(key, point, policy)| {
                    (*key, *policy, run_task(&scenario, &assets, point, *policy, key.replication))
                })
                .collect()
        });
    results.sort_by_key(|(key, ..)| *key);

    // Group task results by grid point; a point with any failed replication
    // is recorded as failed and writes no file (all-or-nothing resume unit).
    let mut failures: Vec<Failure> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut by_point: BTreeMap<usize, Vec<(TaskKey, PolicyKind, Vec<Snapshot>)>> = BTreeMap::new();
    for (key, policy, outcome) in results {
        match outcome {
            Ok(snapshots) => {
                by_point.entry(key.point).or_default().push((key, policy, snapshots));
            }
            Err(e) => failures.push(Failure {
                point: key.point,
                slug: format!("p{:03}", key.point),
                policy: policy.as_str().to_string(),
                replication: key.replication,
                error: e.to_string(),
            }),
        }
    }
    let failed_points: Vec<usize> = failures.iter().map(|f| f.point).collect();

    let mut points_executed = 0;
    for (point_index, runs) in &by_point {
        if failed_points.contains(point_index) {
            continue;
        }
        let slug = format!("p{point_index:03}");
        let rows: Vec<EpisodeRow> = runs
            .iter()
            .flat_map(|(key, policy, snapshots)| {
                let policy = policy.as_str();
                let replication = key.replication;
                snapshots.iter().map(move |s| EpisodeRow::from_snapshot(replication, policy, s))
            })
            .collect();
        let path = episodes_path(output_dir, &scenario, &slug);
        write_atomic(&path, &report::episode_csv_bytes(&rows)?)?;
        points_executed += 1;
        if !opts.quiet {
            eprintln!(
                "point {slug} done ({} policies × {} replications)",
                scenario.policies.len(),
                scenario.replications
            );
        }
    }

    // Stationarity diagnostics are advisory: flag drifting populations but
    // never gate the run. Per-replication trend t statistics overfire on an
    // autocorrelated series, so the test pools the per-replication slopes of
    // each point × policy: under stationarity they scatter around zero, while
    // a real drift gives them a common sign.
    for (point_index, runs) in &by_point {
        let mut slopes: BTreeMap<PolicyKind, Vec<f64>> = BTreeMap::new();
        let mut episodes = 0usize;
        for (_, policy, snapshots) in runs {
            if snapshots.len() >= 3 {
                let trend = stationarity_diagnostic(snapshots).map_err(Error::Simulation)?;
                slopes.entry(*policy).or_default().push(trend.slope);
                episodes = trend.episodes;
            }
        }
        for (kind, slopes) in &slopes {
            if slopes.len() < 2 {
                continue;
            }
            let n = slopes.len() as f64;
            let mean = slopes.iter().sum::<f64>() / n;
            let var = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            if mean.abs() > 2.0 * se && se > 0.0 {
                warnings.push(format!(
                    "point p{point_index:03} policy {}: population drifts {:+.3} per episode \
                     (mean of {} replication slopes, last {} episodes)",
                    kind.as_str(),
                    mean,
                    slopes.len(),
                    episodes
                ));
            }
        }
    }

    let failures_path = output_dir.join(FAILURES_FILE);
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        failures.sort_by(|a, b| {
            (a.point, &a.policy, a.replication).cmp(&(b.point, &b.policy, b.replication))
        });
        write_atomic(&failures_path, &report::failures_csv_bytes(&failures)?)?;
    }

    // Aggregate from disk so resumed and fresh points go through one path.
    let aggregate_rows = report::write_aggregate(output_dir, &scenario, &points)?.rows.len();

    Ok(RunSummary {
        scenario,
        output_dir: output_dir.to_path_buf(),
        points_total: points.len(),
        points_executed,
        points_resumed: resumed.len(),
        failures,
        warnings,
        aggregate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use diversim_core::engine::SimulationConfig;
    use tempfile::TempDir;

    fn tiny_scenario() -> Scenario {
        let mut scenario = Scenario::single("tiny", 2, 11);
        scenario.config = SimulationConfig {
            t_max: 6_000.0,
            initial_population: 50,
            capacity: 10,
            ..SimulationConfig::default()
        };
        scenario.policies = vec![PolicyKind::Null, PolicyKind::HighRisk];
        scenario
    }

    fn read(path: &Path) -> Vec<u8> {
        fs::read(path).unwrap()
    }

    #[test]
    fn run_writes_manifest_episodes_and_aggregate() {
        let dir = TempDir::new().unwrap();
        let summary =
            run_scenario(tiny_scenario(), dir.path(), &RunOptions { quiet: true, ..Default::default() })
                .unwrap();
        assert_eq!(summary.points_total, 1);
        assert_eq!(summary.points_executed, 1);
        assert!(summary.failures.is_empty());
        assert!(dir.path().join(MANIFEST_FILE).exists());
        assert!(dir.path().join(EPISODES_DIR).join("tiny-p000.csv").exists());
        assert!(dir.path().join(AGGREGATE_FILE).exists());
        // 1 point × 2 policies × 2 windows.
        assert_eq!(summary.aggregate_rows, 4);
    }

    #[test]
    fn reruns_are_byte_identical_and_manifest_reruns_too() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let c = TempDir::new().unwrap();
        let opts = RunOptions { quiet: true, ..Default::default() };
        run_scenario(tiny_scenario(), a.path(), &opts).unwrap();
        run_scenario(tiny_scenario(), b.path(), &opts).unwrap();
        // Third run re-loads the scenario straight from the manifest.
        let from_manifest = load_scenario_or_manifest(&a.path().join(MANIFEST_FILE)).unwrap();
        run_scenario(from_manifest, c.path(), &opts).unwrap();

        for file in [
            PathBuf::from(MANIFEST_FILE),
            PathBuf::from(EPISODES_DIR).join("tiny-p000.csv"),
            PathBuf::from(AGGREGATE_FILE),
        ] {
            let bytes = read(&a.path().join(&file));
            assert_eq!(bytes, read(&b.path().join(&file)), "{file:?} differs across reruns");
            assert_eq!(bytes, read(&c.path().join(&file)), "{file:?} differs via manifest");
        }
    }

    #[test]
    fn resume_skips_completed_points_and_reproduces_the_rest() {
        let full = TempDir::new().unwrap();
        let resumed = TempDir::new().unwrap();
        let opts = RunOptions { quiet: true, ..Default::default() };

        let mut scenario = tiny_scenario();
        scenario.axes.delta_inc = Some(vec![0.04, 0.08]);
        run_scenario(scenario.clone(), full.path(), &opts).unwrap();

        // Seed the second directory with only point p000, as if the first
        // run had been interrupted after it.
        fs::create_dir_all(resumed.path().join(EPISODES_DIR)).unwrap();
        fs::write(
            resumed.path().join(MANIFEST_FILE),
            read(&full.path().join(MANIFEST_FILE)),
        )
        .unwrap();
        fs::write(
            resumed.path().join(EPISODES_DIR).join("tiny-p000.csv"),
            read(&full.path().join(EPISODES_DIR).join("tiny-p000.csv")),
        )
        .unwrap();

        let summary = run_scenario(scenario, resumed.path(), &opts).unwrap();
        assert_eq!(summary.points_resumed, 1);
        assert_eq!(summary.points_executed, 1);
        for file in ["tiny-p000.csv", "tiny-p001.csv"] {
            assert_eq!(
                read(&full.path().join(EPISODES_DIR).join(file)),
                read(&resumed.path().join(EPISODES_DIR).join(file)),
                "{file} differs after resume"
            );
        }
        assert_eq!(
            read(&full.path().join(AGGREGATE_FILE)),
            read(&resumed.path().join(AGGREGATE_FILE))
        );
    }

    #[test]
    fn mismatched_scenario_in_the_same_directory_is_refused() {
        let dir = TempDir::new().unwrap();
        let opts = RunOptions { quiet: true, ..Default::default() };
        run_scenario(tiny_scenario(), dir.path(), &opts).unwrap();
        let mut other = tiny_scenario();
        other.seed = 999;
        let err = run_scenario(other, dir.path(), &opts).unwrap_err().to_string();
        assert!(err.contains("different scenario"), "{err}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let one = TempDir::new().unwrap();
        let four = TempDir::new().unwrap();
        let mut scenario = tiny_scenario();
        scenario.axes.capacity = Some(vec![5, 40]);
        run_scenario(
            scenario.clone(),
            one.path(),
            &RunOptions { workers: 1, quiet: true, ..Default::default() },
        )
        .unwrap();
        run_scenario(
            scenario,
            four.path(),
            &RunOptions { workers: 4, quiet: true, ..Default::default() },
        )
        .unwrap();
        for file in ["tiny-p000.csv", "tiny-p001.csv"] {
            assert_eq!(
                read(&one.path().join(EPISODES_DIR).join(file)),
                read(&four.path().join(EPISODES_DIR).join(file)),
                "{file} depends on worker count"
            );
        }
        assert_eq!(read(&one.path().join(AGGREGATE_FILE)), read(&four.path().join(AGGREGATE_FILE)));
    }

    #[test]
    fn explosive_points_fail_without_sinking_the_rest_of_the_grid() {
        let dir = TempDir::new().unwrap();
        let mut scenario = tiny_scenario();
        // δ = 0 explodes (offense feedback); cap the cascade low so the
        // failure surfaces fast. The δ = 0.06 point must still complete.
        scenario.config.max_offense_count = 500;
        scenario.config.t_max = 4_000.0;
        scenario.axes.delta_inc = Some(vec![0.0, 0.06]);
        scenario.policies = vec![PolicyKind::Null];
        scenario.replications = 1;
        let summary = run_scenario(
            scenario,
            dir.path(),
            &RunOptions { quiet: true, ..Default::default() },
        )
        .unwrap();
        assert!(!summary.failures.is_empty());
        assert!(summary.failures.iter().all(|f| f.point == 0));
        assert!(!summary.all_points_complete());
        assert!(!dir.path().join(EPISODES_DIR).join("tiny-p000.csv").exists());
        assert!(dir.path().join(EPISODES_DIR).join("tiny-p001.csv").exists());
        assert!(dir.path().join(FAILURES_FILE).exists());
        // 1 completed point × 1 policy × 2 windows.
        assert_eq!(summary.aggregate_rows, 2);
    }

    #[test]
    fn policy_filter_keeps_null_and_restricts_the_rest() {
        let dir = TempDir::new().unwrap();
        let opts = RunOptions {
            quiet: true,
            policy_filter: Some(vec![PolicyKind::LowRisk]),
            ..Default::default()
        };
        let summary = run_scenario(tiny_scenario(), dir.path(), &opts).unwrap();
        assert_eq!(summary.scenario.policies, vec![PolicyKind::Null, PolicyKind::LowRisk]);
    }
}
