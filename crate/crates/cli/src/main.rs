//! Command-line front end: run scenarios, assemble ad-hoc sweeps, rebuild
//! reports, validate scenario files and model invariants, and print the
//! anchor calibration.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use diversim::report::{self, render_table};
use diversim::runner::{self, RunOptions, RunSummary};
use diversim::scenario::{Axes, Cohort, Scenario};
use diversim::suite;
use diversim::{Error, Result};
use diversim_core::hazard::{
    calibrate_baseline_from_anchor, derive_group_beta, offense_probability, BetaSpec,
    CalibrationAnchor,
};
use diversim_core::metrics::Window;
use diversim_core::policy::PolicyKind;
use diversim_core::Days;

#[derive(Parser)]
#[command(
    name = "diversim",
    version,
    about = "Discrete-event simulator of a capacity-constrained incarceration-diversion program",
    after_help = "Scenario files are TOML; see the bundled files under scenarios/ for the schema. \
                  Output CSVs are deterministic: rerunning a manifest reproduces them byte for byte."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or re-run a manifest.toml) into an output directory.
    Run(RunArgs),
    /// Build a sweep from axis flags on top of a base scenario and run it.
    Sweep(SweepArgs),
    /// Rebuild the aggregate table from a finished (or partial) output directory.
    Report(ReportArgs),
    /// Validate a scenario file and/or run the model invariant suite.
    Validate(ValidateArgs),
    /// Solve the baseline-rate calibration and print λ₀.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (default: runs/<scenario-name>).
    #[arg(short = 'o', long, env = "DIVERSIM_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the scenario's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's replication count.
    #[arg(long)]
    replications: Option<u32>,
    /// Comma-separated policy filter (the null policy is always kept).
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policies: Option<Vec<PolicyKind>>,
    /// Suppress per-point progress lines.
    #[arg(long)]
    quiet: bool,
}

impl OutputArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            workers: self.workers,
            seed_override: self.seed,
            replications_override: self.replications,
            policy_filter: self.policies.clone(),
            quiet: self.quiet,
        }
    }

    fn directory(&self, scenario: &Scenario) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(scenario.file_stem()))
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML, or a manifest.toml from a previous run.
    scenario: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Base scenario file; the built-in defaults when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Name for the sweep (used in output file names).
    #[arg(long, default_value = "sweep")]
    name: String,
    /// Incarceration probability per offense, comma-separated list.
    #[arg(long, value_delimiter = ',')]
    delta_inc: Option<Vec<f64>>,
    /// Mean post-probation dwell time in days, comma-separated list.
    #[arg(long, value_delimiter = ',')]
    off_mean_days: Option<Vec<Days>>,
    /// Treatment effects, ';'-separated: `0.342` or `low=1.709,high=0.068`.
    #[arg(long, value_delimiter = ';', value_parser = parse_beta)]
    beta: Option<Vec<BetaSpec>>,
    /// Mean arrival gap in days, comma-separated list.
    #[arg(long, value_delimiter = ',')]
    arrival_mean_days: Option<Vec<Days>>,
    /// Program capacity, comma-separated list.
    #[arg(long, value_delimiter = ',')]
    capacity: Option<Vec<u32>>,
    /// Cohort variants, comma-separated: default, younger.
    #[arg(long, value_delimiter = ',', value_parser = parse_cohort)]
    cohort: Option<Vec<Cohort>>,
    /// Override the simulated horizon in days.
    #[arg(long)]
    t_max: Option<Days>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a previous run (holds manifest.toml).
    #[arg(env = "DIVERSIM_OUTPUT_DIR")]
    output_dir: PathBuf,
    /// Print only one window: short or long.
    #[arg(long, value_parser = parse_window)]
    window: Option<Window>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario file to check; omitted = invariant suite only.
    scenario: Option<PathBuf>,
    /// Run the model invariant suite on tiny instances.
    #[arg(long)]
    suite: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Median untreated risk score the anchor holds fixed.
    #[arg(long, default_value_t = -1.434, allow_hyphen_values = true)]
    h_med: f64,
    /// Treatment effect β at the anchor.
    #[arg(long, default_value_t = 0.342)]
    beta: f64,
    /// Horizon over which the reduction is measured, in days.
    #[arg(long, default_value_t = 730.0)]
    horizon_days: Days,
    /// Target relative reduction in offense probability (0, 1).
    #[arg(long, default_value_t = 0.25)]
    reduction: f64,
    /// Derive a hazard-scale β from `p_untreated,p_treated`; repeatable.
    #[arg(long, value_parser = parse_probability_pair)]
    derive_beta: Vec<(f64, f64)>,
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    PolicyKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_cohort(s: &str) -> std::result::Result<Cohort, String> {
    match s {
        "default" => Ok(Cohort::Default),
        "younger" => Ok(Cohort::Younger),
        other => Err(format!("unknown cohort '{other}' (expected default or younger)")),
    }
}

fn parse_window(s: &str) -> std::result::Result<Window, String> {
    match s {
        "short" => Ok(Window::Short),
        "long" => Ok(Window::Long),
        other => Err(format!("unknown window '{other}' (expected short or long)")),
    }
}

/// `0.342` → homogeneous; `low=1.709,high=0.068` → per-group.
fn parse_beta(s: &str) -> std::result::Result<BetaSpec, String> {
    if !s.contains('=') {
        let value: f64 = s.trim().parse().map_err(|e| format!("bad β '{s}': {e}"))?;
        return Ok(BetaSpec::Homogeneous { value });
    }
    let (mut low, mut high) = (None, None);
    for part in s.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("bad β component '{part}' (expected key=value)"))?;
        let value: f64 =
            value.trim().parse().map_err(|e| format!("bad β value '{value}': {e}"))?;
        match key.trim() {
            "low" => low = Some(value),
            "high" => high = Some(value),
            other => return Err(format!("unknown β key '{other}' (expected low or high)")),
        }
    }
    match (low, high) {
        (Some(low), Some(high)) => Ok(BetaSpec::PerGroup { low, high }),
        _ => Err(format!("per-group β needs both low= and high= in '{s}'")),
    }
}

fn parse_probability_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (u, t) = s
        .split_once(',')
        .ok_or_else(|| format!("expected p_untreated,p_treated — got '{s}'"))?;
    let untreated: f64 = u.trim().parse().map_err(|e| format!("bad probability '{u}': {e}"))?;
    let treated: f64 = t.trim().parse().map_err(|e| format!("bad probability '{t}': {e}"))?;
    Ok((untreated, treated))
}

fn print_summary(summary: &RunSummary) {
    let s = &summary.scenario;
    println!(
        "scenario '{}': {} point(s) × {} policies × {} replications (seed {})",
        s.name,
        summary.points_total,
        s.policies.len(),
        s.replications,
        s.seed
    );
    println!(
        "executed {}, resumed {}, failed {}",
        summary.points_executed,
        summary.points_resumed,
        summary.failures.len()
    );
    for warning in &summary.warnings {
        eprintln!("warning: {warning}");
    }
    if !summary.failures.is_empty() {
        for f in &summary.failures {
            eprintln!(
                "failed: point {} policy {} replication {}: {}",
                f.slug, f.policy, f.replication, f.error
            );
        }
        eprintln!("failed points are listed in {}", runner::FAILURES_FILE);
    }
    println!(
        "aggregate: {} rows → {}",
        summary.aggregate_rows,
        summary.output_dir.join(runner::AGGREGATE_FILE).display()
    );
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let scenario = runner::load_scenario_or_manifest(&args.scenario)?;
    let dir = args.output.directory(&scenario);
    let summary = runner::run_scenario(scenario, &dir, &args.output.options())?;
    print_summary(&summary);
    Ok(if summary.all_points_complete() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let mut scenario = match &args.base {
        Some(path) => runner::load_scenario_or_manifest(path)?,
        None => Scenario::single(&args.name, 20, 0),
    };
    scenario.name = args.name.clone();
    if let Some(t_max) = args.t_max {
        scenario.config.t_max = t_max;
    }
    let flag_axes = Axes {
        delta_inc: args.delta_inc.clone(),
        off_mean_days: args.off_mean_days.clone(),
        beta: args.beta.clone(),
        arrival_mean_days: args.arrival_mean_days.clone(),
        capacity: args.capacity.clone(),
        cohort: args.cohort.clone(),
    };
    // Flag axes override the base scenario's axes one by one.
    scenario.axes = Axes {
        delta_inc: flag_axes.delta_inc.or(scenario.axes.delta_inc),
        off_mean_days: flag_axes.off_mean_days.or(scenario.axes.off_mean_days),
        beta: flag_axes.beta.or(scenario.axes.beta),
        arrival_mean_days: flag_axes.arrival_mean_days.or(scenario.axes.arrival_mean_days),
        capacity: flag_axes.capacity.or(scenario.axes.capacity),
        cohort: flag_axes.cohort.or(scenario.axes.cohort),
    };
    scenario.validate()?;
    let dir = args.output.directory(&scenario);
    let summary = runner::run_scenario(scenario, &dir, &args.output.options())?;
    print_summary(&summary);
    Ok(if summary.all_points_complete() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_report(args: &ReportArgs) -> Result<ExitCode> {
    let manifest_path = args.output_dir.join(runner::MANIFEST_FILE);
    let manifest = runner::Manifest::from_path(&manifest_path)?;
    let scenario = manifest.scenario;
    scenario.validate()?;
    let points = scenario.points();
    let outcome = report::write_aggregate(&args.output_dir, &scenario, &points)?;
    print!("{}", render_table(&outcome.rows, args.window));
    if !outcome.missing.is_empty() {
        eprintln!("missing points (failed or not yet run): {}", outcome.missing.join(", "));
    }
    println!(
        "aggregate: {} rows → {}",
        outcome.rows.len(),
        args.output_dir.join(runner::AGGREGATE_FILE).display()
    );
    Ok(if outcome.missing.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_validate(args: &ValidateArgs) -> Result<ExitCode> {
    let mut failed = false;
    if let Some(path) = &args.scenario {
        match Scenario::from_path(path) {
            Ok(scenario) => println!(
                "ok: scenario '{}' — {} point(s) × {} policies × {} replications = {} runs",
                scenario.name,
                scenario.points().len(),
                scenario.policies.len(),
                scenario.replications,
                scenario.total_runs()
            ),
            Err(e) => {
                println!("invalid: {e}");
                failed = true;
            }
        }
    }
    if args.suite || args.scenario.is_none() {
        for check in suite::run_suite() {
            if check.passed {
                println!("PASS {}", check.name);
            } else {
                println!("FAIL {}: {}", check.name, check.detail);
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<ExitCode> {
    let anchor = CalibrationAnchor {
        h_med: args.h_med,
        beta: args.beta,
        horizon_days: args.horizon_days,
        reduction: args.reduction,
    };
    let base = calibrate_baseline_from_anchor(&anchor).map_err(Error::Simulation)?;
    let lambda0 = base.rates()[0];
    let cumulative = base
        .cumulative_hazard(anchor.horizon_days)
        .map_err(Error::Simulation)?;
    let untreated =
        offense_probability(&base, anchor.h_med, anchor.horizon_days).map_err(Error::Simulation)?;
    let treated = offense_probability(&base, anchor.h_med - anchor.beta, anchor.horizon_days)
        .map_err(Error::Simulation)?;
    println!("lambda0_per_day       = {lambda0:.16e}");
    println!("cumulative_hazard({}) = {cumulative:.16}", anchor.horizon_days);
    println!("p_offense_untreated   = {untreated:.16}");
    println!("p_offense_treated     = {treated:.16}");
    println!("ratio                 = {:.12} (target {:.12})", treated / untreated, 1.0 - anchor.reduction);
    for &(p_untreated, p_treated) in &args.derive_beta {
        let beta = derive_group_beta(p_untreated, p_treated).map_err(Error::Simulation)?;
        println!("beta({p_untreated}, {p_treated}) = {beta:.16}");
    }
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Calibrate(args) => cmd_calibrate(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
