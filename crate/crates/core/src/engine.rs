//! The discrete-event simulation loop.
//!
//! One engine instance owns one community: an event heap, the active
//! population, and the named random substreams. Events are processed in
//! nondecreasing `(time, insertion-sequence)` order; cancellation is lazy,
//! via per-individual generation counters checked when an event pops.
//! Episode boundaries land on the grid `k·T_E`, update the community mean
//! offense rate μ, snapshot the state, and invoke the treatment policy under
//! the rolling capacity constraint.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{
    compute_risk, open_unit, offense_time_from_uniform, BaselineHazard, BetaSpec,
    CoefficientTable, Treatment,
};
use crate::policy::{Candidate, Policy, PolicyKind};
use crate::population::{
    standard_normal, risk_median, CovariateDistribution, CovariateProfile, Individual, RiskGroup,
};
use crate::seeds::{derive_child_seed, derive_entity_seed, StreamSeeds};
use crate::Days;

/// Probation-term distribution F_prob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermDistribution {
    /// Use each profile's observed probation term.
    Empirical,
    /// Log-normal with the given mean, clipped to `[min_days, max_days]`.
    LogNormal { mean_days: f64, log_sigma: f64, min_days: f64, max_days: f64 },
}

impl TermDistribution {
    /// The fallback used when no empirical terms are trusted: log-normal
    /// matching the reference cohort's mean term, clipped to its range.
    pub fn log_normal_default() -> Self {
        TermDistribution::LogNormal {
            mean_days: 1375.0,
            log_sigma: 0.5,
            min_days: 30.0,
            max_days: 4320.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TermDistribution::Empirical => Ok(()),
            TermDistribution::LogNormal { mean_days, log_sigma, min_days, max_days } => {
                if !(mean_days > 0.0 && mean_days.is_finite())
                    || !(log_sigma >= 0.0 && log_sigma.is_finite())
                    || !(min_days > 0.0 && min_days <= max_days && max_days.is_finite())
                {
                    return Err(Error::Config(format!(
                        "invalid log-normal term parameters: mean {mean_days}, sigma \
                         {log_sigma}, range [{min_days}, {max_days}]"
                    )));
                }
                Ok(())
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, profile: &CovariateProfile, rng: &mut R) -> Days {
        match *self {
            TermDistribution::Empirical => profile.probation_term_days,
            TermDistribution::LogNormal { mean_days, log_sigma, min_days, max_days } => {
                let log_mean = mean_days.ln() - 0.5 * log_sigma * log_sigma;
                (log_mean + log_sigma * standard_normal(rng)).exp().clamp(min_days, max_days)
            }
        }
    }
}

/// Full parameterization of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Simulation horizon, days.
    pub t_max: Days,
    /// Episode length T_E, days.
    pub episode_days: Days,
    /// Treatment capacity C (concurrent enrollment ceiling).
    pub capacity: u32,
    /// Incarceration probability per offense.
    pub delta_inc: f64,
    /// Override for offenses committed off probation (defaults to
    /// `delta_inc`; the source model draws both from the same probability).
    pub delta_inc_off: Option<f64>,
    /// Return limit: an offense at `return_count == r_inc` always
    /// incarcerates.
    pub r_inc: u32,
    /// Mean of the exponential inter-arrival distribution, days.
    pub arrival_mean_days: Days,
    /// Probation-term distribution F_prob.
    pub term_distribution: TermDistribution,
    /// Mean of the exponential off-probation term F_off, days (0 ⇒ exit at
    /// end of probation).
    pub off_mean_days: Days,
    /// Number of individuals present at t=0 (each treated as a fresh arrival
    /// at t=0).
    pub initial_population: u32,
    /// μ(0): community mean offense rate before the first boundary. Default
    /// is the reference cohort's observed first-arrest fraction.
    pub initial_mu: f64,
    pub policy: Policy,
    pub beta: BetaSpec,
    pub seed: u64,
    /// Abort with an error when any individual's cumulative offense count
    /// exceeds this bound. The offense count feeds back into the hazard
    /// multiplicatively, so with δ_inc near 0 nothing bounds an individual's
    /// offense cascade and simulated time stops advancing; this guard turns
    /// that hang into a diagnosable error. Legitimate runs stay far below it:
    /// offenses per individual are geometric with mean 1/δ_inc.
    pub max_offense_count: u32,
    /// Resample a newly treated individual's pending offense from the
    /// decision time with the treated hazard (on by default; off reproduces
    /// the literal source algorithm, where treatment only affects offenses
    /// generated later).
    pub resample_on_treatment: bool,
    /// Clear treatment and re-enter the decision pool when an individual
    /// returns to probation (off by default: the source model preserves τ
    /// across returns, which can transiently exceed capacity).
    pub reset_treatment_on_return: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t_max: 30_000.0,
            episode_days: 100.0,
            capacity: 80,
            delta_inc: 0.048,
            delta_inc_off: None,
            r_inc: 30,
            arrival_mean_days: 5.0,
            term_distribution: TermDistribution::Empirical,
            off_mean_days: 1000.0,
            initial_population: 500,
            initial_mu: 0.378,
            policy: Policy::new(PolicyKind::Null),
            beta: BetaSpec::homogeneous(0.342),
            seed: 0,
            max_offense_count: 100_000,
            resample_on_treatment: true,
            reset_treatment_on_return: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(Error::Config(format!("t_max must be ≥ 0 days, got {}", self.t_max)));
        }
        if !(self.episode_days > 0.0 && self.episode_days.is_finite()) {
            return Err(Error::Config(format!(
                "episode_days must be positive, got {}",
                self.episode_days
            )));
        }
        for (name, delta) in [
            ("delta_inc", Some(self.delta_inc)),
            ("delta_inc_off", self.delta_inc_off),
        ] {
            if let Some(d) = delta {
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::Config(format!("{name} must lie in [0,1], got {d}")));
                }
            }
        }
        if !(self.arrival_mean_days > 0.0 && self.arrival_mean_days.is_finite()) {
            return Err(Error::Config(format!(
                "arrival_mean_days must be positive, got {}",
                self.arrival_mean_days
            )));
        }
        if !(self.off_mean_days >= 0.0 && self.off_mean_days.is_finite()) {
            return Err(Error::Config(format!(
                "off_mean_days must be ≥ 0, got {}",
                self.off_mean_days
            )));
        }
        if !(self.initial_mu >= 0.0 && self.initial_mu.is_finite()) {
            return Err(Error::Config(format!(
                "initial_mu must be ≥ 0, got {}",
                self.initial_mu
            )));
        }
        if self.max_offense_count == 0 {
            return Err(Error::Config("max_offense_count must be positive".into()));
        }
        if let Some(bucket) = self.policy.age_bucket_days {
            if !(bucket > 0.0 && bucket.is_finite()) {
                return Err(Error::Config(format!(
                    "age_bucket_days must be positive, got {bucket}"
                )));
            }
        }
        self.term_distribution.validate()?;
        self.beta.validate()?;
        Ok(())
    }

    /// Number of completed episodes the run will produce.
    pub fn episode_count(&self) -> u32 {
        (self.t_max / self.episode_days).floor() as u32
    }
}

/// End-of-episode summary row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// 1-based episode index.
    pub episode: u32,
    /// Active individuals at the boundary.
    pub population: u32,
    /// Offense events within the episode.
    pub offenses: u32,
    /// Treated on-probation individuals at the boundary.
    pub enrollment: u32,
    /// μ = offenses / max(population, 1), the rate carried into the next
    /// episode.
    pub mu: f64,
    pub incarcerations: u32,
    pub completions: u32,
    pub arrivals: u32,
    pub returns: u32,
}

/// Whole-run accounting; `conserved` is the exact flow identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTotals {
    pub initial_population: u32,
    pub arrivals: u32,
    pub completions: u32,
    pub incarcerations: u32,
    pub returns: u32,
    pub final_population: u32,
    /// Returns scheduled but unprocessed at the horizon (structurally 0 for
    /// same-time returns; tracked so the conservation check stays honest).
    pub pending_returns: u32,
    /// Boundaries at which enrollment exceeded capacity (possible only when
    /// treatment persists across returns).
    pub over_capacity_boundaries: u32,
    /// Largest return count ever reached by any individual.
    pub max_return_count: u32,
}

impl RunTotals {
    /// arrivals + |I₀| = completions + incarcerations + active + pending.
    pub fn conserved(&self) -> bool {
        u64::from(self.arrivals) + u64::from(self.initial_population)
            == u64::from(self.completions)
                + u64::from(self.incarcerations)
                + u64::from(self.final_population)
                + u64::from(self.pending_returns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub snapshots: Vec<Snapshot>,
    pub totals: RunTotals,
    /// Non-fatal anomalies (currently: over-capacity boundaries).
    pub warnings: Vec<String>,
}

/// μ for one completed episode: offenses per active individual, 0 when the
/// community is empty (no one to exert peer influence).
pub(crate) fn boundary_mu(offenses: u32, population: usize) -> f64 {
    if population == 0 {
        0.0
    } else {
        f64::from(offenses) / population as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival,
    Offense { id: u64 },
    EndProbation { id: u64 },
    Exit { id: u64 },
    Return { id: u64 },
    EpisodeBoundary { index: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: Days,
    seq: u64,
    /// Generation of the target individual at scheduling time; a mismatch on
    /// pop means the event was cancelled.
    token: u32,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time.total_cmp(&other.time).is_eq() && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct EpisodeCounters {
    offenses: u32,
    incarcerations: u32,
    completions: u32,
    arrivals: u32,
    returns: u32,
}

struct Engine<'a> {
    config: &'a SimulationConfig,
    dist: &'a CovariateDistribution,
    table: CoefficientTable,
    base: &'a BaselineHazard,
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    clock: Days,
    individuals: BTreeMap<u64, Individual>,
    next_id: u64,
    mu: f64,
    risk_threshold: f64,
    arrivals_rng: ChaCha12Rng,
    covariates_rng: ChaCha12Rng,
    offense_rng: ChaCha12Rng,
    incarceration_rng: ChaCha12Rng,
    covariates_seed: [u8; 32],
    terms_seed: [u8; 32],
    episode: EpisodeCounters,
    snapshots: Vec<Snapshot>,
    arrivals_total: u32,
    completions_total: u32,
    incarcerations_total: u32,
    returns_scheduled: u64,
    returns_processed: u64,
    over_capacity_boundaries: u32,
    max_return_count: u32,
    warnings: Vec<String>,
}

/// Run one simulation with substreams derived from `config.seed`.
pub fn run(
    config: &SimulationConfig,
    dist: &CovariateDistribution,
    table: &CoefficientTable,
    base: &BaselineHazard,
) -> Result<RunResult> {
    run_with_streams(config, dist, table, base, StreamSeeds::from_base(config.seed))
}

/// Run one simulation with externally derived substreams (the paired-
/// replication entry point: share population streams across policies, give
/// each policy its own outcome streams).
pub fn run_with_streams(
    config: &SimulationConfig,
    dist: &CovariateDistribution,
    table: &CoefficientTable,
    base: &BaselineHazard,
    streams: StreamSeeds,
) -> Result<RunResult> {
    config.validate()?;
    let table = table.clone().with_beta(config.beta)?;
    let mut engine = Engine {
        config,
        dist,
        table,
        base,
        heap: BinaryHeap::new(),
        next_seq: 0,
        clock: 0.0,
        individuals: BTreeMap::new(),
        next_id: 0,
        mu: config.initial_mu,
        risk_threshold: 0.0,
        arrivals_rng: ChaCha12Rng::from_seed(streams.arrivals),
        covariates_rng: ChaCha12Rng::from_seed(streams.covariates),
        offense_rng: ChaCha12Rng::from_seed(streams.offense),
        incarceration_rng: ChaCha12Rng::from_seed(streams.incarceration),
        covariates_seed: streams.covariates,
        terms_seed: streams.terms,
        episode: EpisodeCounters::default(),
        snapshots: Vec::with_capacity(config.episode_count() as usize),
        arrivals_total: 0,
        completions_total: 0,
        incarcerations_total: 0,
        returns_scheduled: 0,
        returns_processed: 0,
        over_capacity_boundaries: 0,
        max_return_count: 0,
        warnings: Vec::new(),
    };
    engine.initialize()?;
    engine.run_loop()?;
    Ok(engine.finish())
}

impl Engine<'_> {
    fn push_event(&mut self, time: Days, token: u32, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { time, seq, token, kind }));
    }

    fn exponential(mean: Days, rng: &mut ChaCha12Rng) -> Days {
        if mean == 0.0 {
            return 0.0;
        }
        -mean * open_unit(rng).ln()
    }

    /// Untreated score used for risk-group classification: profile at its
    /// arrival age, j=0, μ=μ(0). Classifying everyone at the same μ makes the
    /// group a pure function of the profile, shared across paired policies.
    fn classification_score(&self, profile: &CovariateProfile) -> Result<f64> {
        let age_days = profile.age_years * crate::DAYS_PER_YEAR;
        Ok(compute_risk(
            &self.table,
            profile,
            age_days,
            0,
            self.config.initial_mu,
            Treatment::Untreated,
        )?
        .value)
    }

    /// Probation and off-probation term draws for entry `entry` (0 = first
    /// arrival, k = k-th return). Seeded per (individual, entry) so paired
    /// runs draw identical terms regardless of when returns happen.
    fn draw_terms(&self, id: u64, entry: u32, profile: &CovariateProfile) -> (Days, Days) {
        let mut rng = ChaCha12Rng::from_seed(derive_entity_seed(&self.terms_seed, id, entry));
        let term = self.config.term_distribution.sample(profile, &mut rng);
        let off_term = Self::exponential(self.config.off_mean_days, &mut rng);
        (term, off_term)
    }

    fn initialize(&mut self) -> Result<()> {
        for p in 1..=self.config.episode_count() {
            let time = f64::from(p) * self.config.episode_days;
            self.push_event(time, 0, EventKind::EpisodeBoundary { index: p });
        }

        let mut pending = Vec::with_capacity(self.config.initial_population as usize);
        for _ in 0..self.config.initial_population {
            let id = self.next_id;
            self.next_id += 1;
            let profile = self.dist.sample_profile(&mut self.covariates_rng);
            let (term, off_term) = self.draw_terms(id, 0, &profile);
            pending.push((id, profile, term, off_term));
        }

        // Classification threshold: median untreated score of the initial
        // population, or of a fixed-size reference sample when starting empty.
        let scores: Vec<f64> = if pending.is_empty() {
            let seed = derive_child_seed(&self.covariates_seed, "risk-threshold");
            let mut rng = ChaCha12Rng::from_seed(seed);
            let mut sample = Vec::with_capacity(4096);
            for _ in 0..4096 {
                let profile = self.dist.sample_profile(&mut rng);
                sample.push(self.classification_score(&profile)?);
            }
            sample
        } else {
            pending
                .iter()
                .map(|(_, profile, _, _)| self.classification_score(profile))
                .collect::<Result<_>>()?
        };
        self.risk_threshold = risk_median(&scores)?;

        for (id, profile, term, off_term) in pending {
            let group = self.classify(&profile)?;
            let individual = Individual::new(id, profile, 0.0, term, off_term, group);
            self.push_event(individual.end_probation_time(), 0, EventKind::EndProbation { id });
            self.push_event(individual.exit_time, 0, EventKind::Exit { id });
            self.individuals.insert(id, individual);
        }
        let initial_ids: Vec<u64> = self.individuals.keys().copied().collect();
        for id in initial_ids {
            self.generate_offense(id, 0.0)?;
        }

        let first = Self::exponential(self.config.arrival_mean_days, &mut self.arrivals_rng);
        self.push_event(first, 0, EventKind::Arrival);
        Ok(())
    }

    fn classify(&self, profile: &CovariateProfile) -> Result<RiskGroup> {
        let score = self.classification_score(profile)?;
        Ok(if score >= self.risk_threshold { RiskGroup::High } else { RiskGroup::Low })
    }

    fn event_is_valid(&self, event: &Event) -> bool {
        match event.kind {
            EventKind::Arrival | EventKind::EpisodeBoundary { .. } => true,
            EventKind::Offense { id } => self
                .individuals
                .get(&id)
                .is_some_and(|i| i.offense_gen == event.token),
            EventKind::EndProbation { id }
            | EventKind::Exit { id }
            | EventKind::Return { id } => self
                .individuals
                .get(&id)
                .is_some_and(|i| i.lifecycle_gen == event.token),
        }
    }

    fn run_loop(&mut self) -> Result<()> {
        while let Some(Reverse(event)) = self.heap.pop() {
            if event.time > self.config.t_max {
                break;
            }
            if event.time < self.clock {
                return Err(Error::Ordering(format!(
                    "event at t={} popped after clock reached {}",
                    event.time, self.clock
                )));
            }
            if !self.event_is_valid(&event) {
                continue;
            }
            self.clock = event.time;
            match event.kind {
                EventKind::Arrival => self.handle_arrival(event.time)?,
                EventKind::Offense { id } => self.handle_offense(id, event.time)?,
                EventKind::EndProbation { id } => self.handle_end_probation(id, event.time)?,
                EventKind::Exit { id } => self.handle_exit(id),
                EventKind::Return { id } => self.handle_return(id, event.time)?,
                EventKind::EpisodeBoundary { index } => self.handle_boundary(index, event.time)?,
            }
        }
        Ok(())
    }

    fn handle_arrival(&mut self, t: Days) -> Result<()> {
        let id = self.next_id;
        self.next_id += 1;
        let profile = self.dist.sample_profile(&mut self.covariates_rng);
        let (term, off_term) = self.draw_terms(id, 0, &profile);
        let group = self.classify(&profile)?;
        let individual = Individual::new(id, profile, t, term, off_term, group);
        self.push_event(individual.end_probation_time(), 0, EventKind::EndProbation { id });
        self.push_event(individual.exit_time, 0, EventKind::Exit { id });
        self.individuals.insert(id, individual);
        self.generate_offense(id, t)?;
        self.episode.arrivals += 1;
        self.arrivals_total += 1;

        let gap = Self::exponential(self.config.arrival_mean_days, &mut self.arrivals_rng);
        self.push_event(t + gap, 0, EventKind::Arrival);
        Ok(())
    }

    fn handle_offense(&mut self, id: u64, t: Days) -> Result<()> {
        let config = self.config;
        let individual = self
            .individuals
            .get_mut(&id)
            .ok_or_else(|| Error::Ordering(format!("offense for missing individual {id}")))?;
        individual.update_dynamics(t, true)?;
        self.episode.offenses += 1;
        if individual.offense_count > config.max_offense_count {
            return Err(Error::Domain(format!(
                "individual {id} exceeded {} offenses at t = {t:.3}; the offense \
                 feedback is explosive at this parameter point (delta_inc = {}), \
                 so simulated time cannot advance past the cascade — raise \
                 delta_inc or max_offense_count",
                config.max_offense_count, config.delta_inc
            )));
        }

        let delta = if individual.off_probation {
            config.delta_inc_off.unwrap_or(config.delta_inc)
        } else {
            config.delta_inc
        };
        let incarcerated = self.incarceration_rng.gen::<f64>() < delta;

        if incarcerated || individual.return_count >= config.r_inc {
            self.individuals.remove(&id);
            self.episode.incarcerations += 1;
            self.incarcerations_total += 1;
        } else if individual.off_probation {
            individual.off_probation = false;
            individual.return_count += 1;
            self.max_return_count = self.max_return_count.max(individual.return_count);
            individual.lifecycle_gen += 1; // cancels the pending exit
            let token = individual.lifecycle_gen;
            self.push_event(t, token, EventKind::Return { id });
            self.returns_scheduled += 1;
        } else {
            self.generate_offense(id, t)?;
        }
        Ok(())
    }

    fn handle_end_probation(&mut self, id: u64, t: Days) -> Result<()> {
        let individual = self
            .individuals
            .get_mut(&id)
            .ok_or_else(|| Error::Ordering(format!("end-probation for missing individual {id}")))?;
        individual.update_dynamics(t, false)?;
        individual.off_probation = true;
        Ok(())
    }

    fn handle_exit(&mut self, id: u64) {
        self.individuals.remove(&id);
        self.episode.completions += 1;
        self.completions_total += 1;
    }

    fn handle_return(&mut self, id: u64, t: Days) -> Result<()> {
        let reset = self.config.reset_treatment_on_return;
        let (entry, profile) = {
            let individual = self
                .individuals
                .get(&id)
                .ok_or_else(|| Error::Ordering(format!("return for missing individual {id}")))?;
            (individual.return_count, individual.profile.clone())
        };
        let (term, off_term) = self.draw_terms(id, entry, &profile);
        let individual = self.individuals.get_mut(&id).expect("checked above");
        individual.update_dynamics(t, false)?;
        individual.reenter(t, term, off_term);
        if reset {
            individual.treated = false;
            individual.not_decided = true;
        }
        let token = individual.lifecycle_gen;
        let end_probation = individual.end_probation_time();
        let exit = individual.exit_time;
        self.push_event(end_probation, token, EventKind::EndProbation { id });
        self.push_event(exit, token, EventKind::Exit { id });
        self.episode.returns += 1;
        self.returns_processed += 1;
        self.generate_offense(id, t)?;
        Ok(())
    }

    /// Draw the next offense for `id` from time `t`; push it only if it lands
    /// before the individual's exit.
    fn generate_offense(&mut self, id: u64, t: Days) -> Result<()> {
        let individual = self
            .individuals
            .get(&id)
            .ok_or_else(|| Error::Ordering(format!("offense generation for missing {id}")))?;
        let age_days = individual.initial_age_days + (t - individual.arrival_time);
        let treatment = Treatment::from_flag(individual.treated, individual.risk_group);
        let exit_time = individual.exit_time;
        let token = individual.offense_gen;
        let h = compute_risk(
            &self.table,
            &individual.profile,
            age_days,
            individual.offense_count,
            self.mu,
            treatment,
        )?
        .value;
        let u = open_unit(&mut self.offense_rng);
        let wait = offense_time_from_uniform(self.base, h, u)?;
        if t + wait < exit_time {
            self.push_event(t + wait, token, EventKind::Offense { id });
        }
        Ok(())
    }

    fn handle_boundary(&mut self, index: u32, t: Days) -> Result<()> {
        let population = self.individuals.len();
        let enrollment =
            self.individuals.values().filter(|i| i.treated && i.on_probation()).count();
        self.mu = boundary_mu(self.episode.offenses, population);
        self.snapshots.push(Snapshot {
            episode: index,
            population: population as u32,
            offenses: self.episode.offenses,
            enrollment: enrollment as u32,
            mu: self.mu,
            incarcerations: self.episode.incarcerations,
            completions: self.episode.completions,
            arrivals: self.episode.arrivals,
            returns: self.episode.returns,
        });

        let mut candidates = Vec::new();
        for individual in self.individuals.values() {
            if !individual.not_decided {
                continue;
            }
            let age_days = individual.initial_age_days + (t - individual.arrival_time);
            let risk = compute_risk(
                &self.table,
                &individual.profile,
                age_days,
                individual.offense_count,
                self.mu,
                Treatment::Untreated,
            )?
            .value;
            candidates.push(Candidate {
                id: individual.id,
                risk,
                age_days,
                on_probation: individual.on_probation(),
            });
        }

        let capacity = self.config.capacity as usize;
        if enrollment > capacity {
            self.over_capacity_boundaries += 1;
            self.warnings.push(format!(
                "episode {index}: enrollment {enrollment} exceeds capacity {capacity} \
                 (treatment persisted across a return)"
            ));
        }
        let remaining = capacity.saturating_sub(enrollment);
        let decisions = self.config.policy.decide(&candidates, remaining);
        self.check_policy_contract(&decisions, &candidates, remaining)?;
        self.apply_treatment_assignment(&decisions, t)?;
        for candidate in &candidates {
            if let Some(individual) = self.individuals.get_mut(&candidate.id) {
                individual.not_decided = false;
            }
        }
        self.episode = EpisodeCounters::default();
        Ok(())
    }

    fn check_policy_contract(
        &self,
        decisions: &[u64],
        candidates: &[Candidate],
        remaining: usize,
    ) -> Result<()> {
        if decisions.len() > remaining {
            return Err(Error::PolicyContract(format!(
                "policy selected {} individuals with only {remaining} slots remaining",
                decisions.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in decisions {
            let candidate = candidates.iter().find(|c| c.id == *id).ok_or_else(|| {
                Error::PolicyContract(format!("policy selected non-candidate {id}"))
            })?;
            if !candidate.on_probation {
                return Err(Error::PolicyContract(format!(
                    "policy selected off-probation individual {id}"
                )));
            }
            if !seen.insert(*id) {
                return Err(Error::PolicyContract(format!("policy selected {id} twice")));
            }
        }
        Ok(())
    }

    fn apply_treatment_assignment(&mut self, decisions: &[u64], t: Days) -> Result<()> {
        for &id in decisions {
            let individual = self
                .individuals
                .get_mut(&id)
                .ok_or_else(|| Error::PolicyContract(format!("selected individual {id} gone")))?;
            individual.treated = true;
            if self.config.resample_on_treatment {
                individual.offense_gen += 1; // invalidates the pending offense
                individual.update_dynamics(t, false)?;
                self.generate_offense(id, t)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> RunResult {
        let pending = self.returns_scheduled - self.returns_processed;
        RunResult {
            snapshots: self.snapshots,
            totals: RunTotals {
                initial_population: self.config.initial_population,
                arrivals: self.arrivals_total,
                completions: self.completions_total,
                incarcerations: self.incarcerations_total,
                returns: self.returns_processed as u32,
                final_population: self.individuals.len() as u32,
                pending_returns: pending as u32,
                over_capacity_boundaries: self.over_capacity_boundaries,
                max_return_count: self.max_return_count,
            },
            warnings: self.warnings,
        }
    }
}
