//! The `validate` subcommand's invariant suite: fast structural checks on
//! tiny instances that catch wiring mistakes before a long sweep is
//! launched. Each check prints one PASS/FAIL line.

use diversim_core::engine::{run, run_with_streams, RunResult, SimulationConfig};
use diversim_core::hazard::{calibrate_baseline_from_anchor, CalibrationAnchor, CoefficientTable};
use diversim_core::metrics::{per_capita, relative_to_null, window_metrics, Window};
use diversim_core::policy::{Policy, PolicyKind};
use diversim_core::population::CovariateDistribution;
use diversim_core::seeds::StreamSeeds;

/// Outcome of one invariant check.
#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str) -> Self {
        CheckResult { name, passed: true, detail: String::new() }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        CheckResult { name, passed: false, detail }
    }
}

struct Assets {
    dist: CovariateDistribution,
    table: CoefficientTable,
    base: diversim_core::hazard::BaselineHazard,
}

fn assets() -> diversim_core::Result<Assets> {
    Ok(Assets {
        dist: CovariateDistribution::bundled(),
        table: CoefficientTable::bundled(),
        base: calibrate_baseline_from_anchor(&CalibrationAnchor::default())?,
    })
}

fn tiny_config(seed: u64) -> SimulationConfig {
    SimulationConfig {
        t_max: 3_000.0,
        initial_population: 100,
        capacity: 20,
        seed,
        ..SimulationConfig::default()
    }
}

fn run_tiny(a: &Assets, config: &SimulationConfig) -> diversim_core::Result<RunResult> {
    run(config, &a.dist, &a.table, &a.base)
}

/// Exact flow identity and the structural absence of pending returns.
fn check_conservation(a: &Assets) -> CheckResult {
    const NAME: &str = "conservation-identity";
    for seed in 0..3u64 {
        let config = SimulationConfig {
            policy: Policy::new(PolicyKind::HighRisk),
            ..tiny_config(seed)
        };
        match run_tiny(a, &config) {
            Ok(result) => {
                if !result.totals.conserved() || result.totals.pending_returns != 0 {
                    return CheckResult::fail(
                        NAME,
                        format!("seed {seed}: totals {:?}", result.totals),
                    );
                }
            }
            Err(e) => return CheckResult::fail(NAME, format!("seed {seed}: {e}")),
        }
    }
    CheckResult::pass(NAME)
}

/// The null policy and a zero-capacity program are the same system.
fn check_null_equals_zero_capacity(a: &Assets) -> CheckResult {
    const NAME: &str = "null-equals-zero-capacity";
    let streams = StreamSeeds::from_base(5);
    let null = SimulationConfig { policy: Policy::new(PolicyKind::Null), ..tiny_config(5) };
    let mut runs = Vec::new();
    for (label, config) in [
        ("null C=20", null.clone()),
        (
            "high-risk C=0",
            SimulationConfig {
                policy: Policy::new(PolicyKind::HighRisk),
                capacity: 0,
                ..null.clone()
            },
        ),
        (
            "low-risk C=0",
            SimulationConfig {
                policy: Policy::new(PolicyKind::LowRisk),
                capacity: 0,
                ..null.clone()
            },
        ),
    ] {
        match run_with_streams(&config, &a.dist, &a.table, &a.base, streams) {
            Ok(result) => runs.push((label, result)),
            Err(e) => return CheckResult::fail(NAME, format!("{label}: {e}")),
        }
    }
    let reference = &runs[0].1;
    for (label, result) in &runs[1..] {
        if result.snapshots != reference.snapshots || result.totals != reference.totals {
            return CheckResult::fail(NAME, format!("{label} diverged from the null run"));
        }
    }
    CheckResult::pass(NAME)
}

/// With common random numbers, null compared against itself is exactly zero.
fn check_paired_null_delta_is_zero(a: &Assets) -> CheckResult {
    const NAME: &str = "paired-null-self-delta-zero";
    let mut first = Vec::new();
    let mut second = Vec::new();
    for replication in 0..3u32 {
        let config = tiny_config(17);
        let streams = StreamSeeds::paired(17, replication, PolicyKind::Null.as_str());
        for target in [&mut first, &mut second] {
            match run_with_streams(&config, &a.dist, &a.table, &a.base, streams) {
                Ok(result) => match window_metrics(&result.snapshots, Window::Short) {
                    Ok(metrics) => target.push(metrics),
                    Err(e) => return CheckResult::fail(NAME, e.to_string()),
                },
                Err(e) => return CheckResult::fail(NAME, e.to_string()),
            }
        }
    }
    match relative_to_null(&first, &second, true) {
        Ok(deltas) => {
            let all = [
                deltas.offenses,
                deltas.incarcerations,
                deltas.completions,
                deltas.population,
            ];
            if all.iter().any(|d| d.mean != 0.0 || d.half_width != 0.0) {
                return CheckResult::fail(NAME, format!("nonzero self-delta: {deltas:?}"));
            }
            CheckResult::pass(NAME)
        }
        Err(e) => CheckResult::fail(NAME, e.to_string()),
    }
}

/// Per-capita metrics are invariant to scaling counts and population alike.
fn check_per_capita_normalization() -> CheckResult {
    const NAME: &str = "per-capita-normalization";
    let cases = [(13u32, 40u32), (7, 9), (0, 5), (250, 1000)];
    for (count, population) in cases {
        let reference = per_capita(count, population);
        for factor in [2u32, 3, 4, 8] {
            let scaled = per_capita(count * factor, population * factor);
            if (scaled - reference).abs() > 1e-15 {
                return CheckResult::fail(
                    NAME,
                    format!("({count},{population})×{factor}: {scaled} ≠ {reference}"),
                );
            }
        }
    }
    CheckResult::pass(NAME)
}

/// Identical configuration and seed give identical trajectories.
fn check_determinism(a: &Assets) -> CheckResult {
    const NAME: &str = "determinism";
    let config = SimulationConfig {
        policy: Policy::new(PolicyKind::AgeFirstLowRisk),
        ..tiny_config(23)
    };
    match (run_tiny(a, &config), run_tiny(a, &config)) {
        (Ok(x), Ok(y)) => {
            if x.snapshots == y.snapshots && x.totals == y.totals {
                CheckResult::pass(NAME)
            } else {
                CheckResult::fail(NAME, "repeated run diverged".into())
            }
        }
        (Err(e), _) | (_, Err(e)) => CheckResult::fail(NAME, e.to_string()),
    }
}

/// Paired seed derivation: population streams shared across policies,
/// outcome streams distinct.
fn check_stream_pairing() -> CheckResult {
    const NAME: &str = "paired-stream-derivation";
    let x = StreamSeeds::paired(9, 1, PolicyKind::Null.as_str());
    let y = StreamSeeds::paired(9, 1, PolicyKind::HighRisk.as_str());
    let shared = x.arrivals == y.arrivals && x.covariates == y.covariates && x.terms == y.terms;
    let distinct = x.offense != y.offense && x.incarceration != y.incarceration;
    let stable = StreamSeeds::paired(9, 1, PolicyKind::Null.as_str()) == x;
    let replication_sensitive = StreamSeeds::paired(9, 2, PolicyKind::Null.as_str()) != x;
    if shared && distinct && stable && replication_sensitive {
        CheckResult::pass(NAME)
    } else {
        CheckResult::fail(
            NAME,
            format!(
                "shared={shared} distinct={distinct} stable={stable} \
                 replication_sensitive={replication_sensitive}"
            ),
        )
    }
}

/// Run every invariant check on tiny instances (a few seconds in total).
pub fn run_suite() -> Vec<CheckResult> {
    let a = match assets() {
        Ok(a) => a,
        Err(e) => {
            return vec![CheckResult::fail("assets", format!("cannot build model assets: {e}"))]
        }
    };
    vec![
        check_conservation(&a),
        check_null_equals_zero_capacity(&a),
        check_paired_null_delta_is_zero(&a),
        check_per_capita_normalization(),
        check_determinism(&a),
        check_stream_pairing(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_whole_suite_passes() {
        let results = run_suite();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
