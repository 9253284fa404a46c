//! Misclassification metric, single trials, and parallel budget sweeps.

use std::io::{Read, Write};
use std::time::Instant;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{run_asp, AspOutcome};
use crate::error::{Error, Result};
use crate::model::{build_instance, SbmInstance, SbmParams};
use crate::rng::derive_seed;
use crate::sampling::{urs1_run, urs2_run, ObservationStore};
use crate::spectral::{build_matrix, PartitionEstimate, SpectralPartition};

/// Largest `K` solved by enumerating all `K!` relabelings.
pub const BRUTE_FORCE_MAX_K: usize = 8;

/// `confusion[e][t]` counts nodes with estimate `e` and truth `t`.
pub fn confusion_matrix(est: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if est.len() != truth.len() {
        return Err(Error::InvalidParams(format!(
            "estimate covers {} nodes, truth {}",
            est.len(),
            truth.len()
        )));
    }
    let mut c = vec![vec![0u64; k]; k];
    for (&e, &t) in est.iter().zip(truth) {
        if e >= k || t >= k {
            return Err(Error::InvalidParams(format!("label outside 0..{k}")));
        }
        c[e][t] += 1;
    }
    Ok(c)
}

/// Largest number of agreeing nodes over all relabelings, by enumeration.
pub fn best_agreement_brute_force(confusion: &[Vec<u64>]) -> u64 {
    fn rec(c: &[Vec<u64>], row: usize, used: &mut [bool]) -> u64 {
        if row == c.len() {
            return 0;
        }
        let mut best = 0;
        for col in 0..c.len() {
            if !used[col] {
                used[col] = true;
                best = best.max(c[row][col] + rec(c, row + 1, used));
                used[col] = false;
            }
        }
        best
    }
    rec(confusion, 0, &mut vec![false; confusion.len()])
}

/// Largest number of agreeing nodes over all relabelings, by maximum-weight
/// bipartite matching.
pub fn best_agreement_matching(confusion: &[Vec<u64>]) -> u64 {
    if confusion.is_empty() {
        return 0;
    }
    let weights = Matrix::from_rows(confusion.iter().map(|r| r.iter().map(|&x| x as i64)))
        .expect("square confusion matrix");
    kuhn_munkres(&weights).0 as u64
}

/// Fraction of nodes misclassified under the best relabeling of `est`.
pub fn misclassification_labels(est: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Ok(0.0);
    }
    let c = confusion_matrix(est, truth, k)?;
    let agree = if k <= BRUTE_FORCE_MAX_K {
        best_agreement_brute_force(&c)
    } else {
        best_agreement_matching(&c)
    };
    Ok((truth.len() as u64 - agree) as f64 / truth.len() as f64)
}

pub fn misclassification_rate(est: &PartitionEstimate, truth: &SbmInstance) -> Result<f64> {
    if est.k != truth.k() {
        return Err(Error::ClusterCountMismatch {
            estimate: est.k,
            truth: truth.k(),
        });
    }
    misclassification_labels(&est.labels, &truth.assignment, est.k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Urs1,
    Urs2,
    Asp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Sp,
    Asp,
}

impl Strategy {
    pub fn algo(self) -> Algo {
        match self {
            Strategy::Asp => Algo::Asp,
            _ => Algo::Sp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Urs1 => "urs1",
            Strategy::Urs2 => "urs2",
            Strategy::Asp => "asp",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "urs1" => Ok(Strategy::Urs1),
            "urs2" => Ok(Strategy::Urs2),
            "asp" => Ok(Strategy::Asp),
            other => Err(Error::Parse(format!("unknown strategy {other:?} (expected urs1, urs2 or asp)"))),
        }
    }
}

/// One budget sweep: the cartesian product of `t_values` and `seeds`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub params: SbmParams,
    pub strategy: Strategy,
    pub t_values: Vec<u64>,
    /// Seed indices; the network of seed index `s` is shared by every budget.
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    /// Fill `runtime_ms`; off by default so output is byte-reproducible.
    pub wall_clock: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.t_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidParams("sweep needs at least one budget and one seed".into()));
        }
        if self.t_values[0] == 0 || self.t_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams(format!(
                "budgets must be positive and strictly ascending, got {:?}",
                self.t_values
            )));
        }
        Ok(())
    }
}

/// One CSV row of trial output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub p: f64,
    pub q: f64,
    #[serde(rename = "T")]
    pub t: u64,
    pub strategy: Strategy,
    pub algo: Algo,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub failed: bool,
    pub runtime_ms: Option<f64>,
}

/// Per-trial facts kept out of the CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub trimmed_fraction: Option<f64>,
    pub p_hat: Option<f64>,
    pub q_hat: Option<f64>,
    pub randomly_assigned: Option<usize>,
    pub consumed: Option<u64>,
    pub error: Option<String>,
    /// The failure was a budget below the algorithm's minimum.
    pub budget_too_small: bool,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub record: ExperimentRecord,
    pub diagnostics: Diagnostics,
    pub estimate: Option<PartitionEstimate>,
}

/// Seed of the network for seed index `s`.
pub fn instance_seed(master: u64, seed_index: u64) -> u64 {
    derive_seed(master, &[seed_index])
}

/// Seed of the sampling and algorithm randomness for budget `t`, index `s`.
pub fn trial_seed(master: u64, t: u64, seed_index: u64) -> u64 {
    derive_seed(master, &[t, seed_index])
}

/// Observations drawn by a non-adaptive trial with trial seed `seed`.
pub fn trial_observations(inst: &SbmInstance, strategy: Strategy, t: u64, seed: u64) -> Result<ObservationStore> {
    match strategy {
        Strategy::Urs1 => urs1_run(inst, t, derive_seed(seed, &[0])),
        Strategy::Urs2 => urs2_run(inst, t, derive_seed(seed, &[0])),
        Strategy::Asp => Err(Error::InvalidParams("adaptive sampling has no fixed observation set".into())),
    }
}

/// Samples and clusters `inst` with budget `t`. Algorithm failures are
/// returned as a failed record; only invalid input is an `Err`.
pub fn run_trial_on(
    inst: &SbmInstance,
    strategy: Strategy,
    t: u64,
    seed: u64,
    seed_index: u64,
    wall_clock: bool,
) -> Result<TrialOutcome> {
    if strategy == Strategy::Asp {
        return run_asp_trial(inst, t, seed, seed_index, wall_clock).map(|(out, _)| out);
    }
    let start = Instant::now();
    let store = trial_observations(inst, strategy, t, seed)?;
    replay_from(inst, &store, strategy, t, seed, seed_index, wall_clock, start)
}

/// ASP trial that also hands back the full run, absent on failure.
pub fn run_asp_trial(
    inst: &SbmInstance,
    t: u64,
    seed: u64,
    seed_index: u64,
    wall_clock: bool,
) -> Result<(TrialOutcome, Option<AspOutcome>)> {
    let start = Instant::now();
    let mut diag = Diagnostics::default();
    let (result, full) = match run_asp(inst, t, inst.k(), seed) {
        Ok(o) => {
            diag.p_hat = Some(o.kernels.p_hat);
            diag.q_hat = Some(o.kernels.q_hat);
            diag.randomly_assigned = Some(o.randomly_assigned.len());
            diag.consumed = Some(o.consumed);
            (Ok(o.estimate.clone()), Some(o))
        }
        Err(e) => (Err(e), None),
    };
    let out = finish_trial(inst, Strategy::Asp, t, seed_index, wall_clock, start, result, diag)?;
    Ok((out, full))
}

/// Clusters previously drawn observations exactly as `run_trial_on` would.
/// `seed` is the trial seed the observations were drawn with.
pub fn replay_trial(
    inst: &SbmInstance,
    store: &ObservationStore,
    strategy: Strategy,
    seed: u64,
    seed_index: u64,
    wall_clock: bool,
) -> Result<TrialOutcome> {
    replay_from(inst, store, strategy, store.total_used(), seed, seed_index, wall_clock, Instant::now())
}

#[allow(clippy::too_many_arguments)]
fn replay_from(
    inst: &SbmInstance,
    store: &ObservationStore,
    strategy: Strategy,
    t: u64,
    seed: u64,
    seed_index: u64,
    wall_clock: bool,
    start: Instant,
) -> Result<TrialOutcome> {
    if store.n() != inst.n() {
        return Err(Error::InvalidParams(format!("observations cover {} nodes, network has {}", store.n(), inst.n())));
    }
    let mut diag = Diagnostics { consumed: Some(store.total_used()), ..Diagnostics::default() };
    let result = SpectralPartition::new(inst.k())
        .run(&build_matrix(store), derive_seed(seed, &[1]))
        .map(|o| {
            diag.trimmed_fraction = Some(o.trimmed_fraction());
            o.estimate
        });
    finish_trial(inst, strategy, t, seed_index, wall_clock, start, result, diag)
}

#[allow(clippy::too_many_arguments)]
fn finish_trial(
    inst: &SbmInstance,
    strategy: Strategy,
    t: u64,
    seed_index: u64,
    wall_clock: bool,
    start: Instant,
    result: Result<PartitionEstimate>,
    mut diag: Diagnostics,
) -> Result<TrialOutcome> {
    let (epsilon, estimate) = match result {
        Ok(est) => (Some(misclassification_rate(&est, inst)?), Some(est)),
        Err(e) if e.is_validation() && !matches!(e, Error::BudgetTooSmall(_)) => return Err(e),
        Err(e) => {
            diag.budget_too_small = matches!(e, Error::BudgetTooSmall(_));
            diag.error = Some(e.to_string());
            (None, None)
        }
    };
    diag.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let p = &inst.params;
    Ok(TrialOutcome {
        record: ExperimentRecord {
            n: p.n,
            k: p.k,
            p: p.p,
            q: p.q,
            t,
            strategy,
            algo: strategy.algo(),
            seed: seed_index,
            failed: epsilon.is_none(),
            epsilon,
            runtime_ms: wall_clock.then_some(diag.elapsed_ms),
        },
        diagnostics: diag,
        estimate,
    })
}

/// Builds the network for `seed_index` and runs one trial on it.
pub fn run_trial(params: &SbmParams, strategy: Strategy, t: u64, master: u64, seed_index: u64, wall_clock: bool) -> Result<TrialOutcome> {
    let inst = build_instance(params, instance_seed(master, seed_index))?;
    run_trial_on(&inst, strategy, t, trial_seed(master, t, seed_index), seed_index, wall_clock)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub p: f64,
    pub q: f64,
    #[serde(rename = "T")]
    pub t: u64,
    pub strategy: Strategy,
    pub algo: Algo,
    /// Non-failed trials entering the statistics.
    pub trials: usize,
    pub eps_mean: Option<f64>,
    /// Sample standard deviation; empty below two trials.
    pub eps_std: Option<f64>,
    pub eps_median: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// One row per budget, in order of first appearance.
pub fn aggregate(records: &[ExperimentRecord]) -> Vec<AggregateRow> {
    let mut budgets: Vec<u64> = Vec::new();
    for r in records {
        if !budgets.contains(&r.t) {
            budgets.push(r.t);
        }
    }
    budgets
        .into_iter()
        .map(|t| {
            let group: Vec<&ExperimentRecord> = records.iter().filter(|r| r.t == t).collect();
            let eps: Vec<f64> = group.iter().filter_map(|r| r.epsilon).collect();
            let count = eps.len();
            let mean = (count > 0).then(|| eps.iter().sum::<f64>() / count as f64);
            let std = mean.filter(|_| count > 1).map(|m| {
                (eps.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            });
            let first = group[0];
            AggregateRow {
                n: first.n,
                k: first.k,
                p: first.p,
                q: first.q,
                t,
                strategy: first.strategy,
                algo: first.algo,
                trials: count,
                eps_mean: mean,
                eps_std: std,
                eps_median: median(&eps),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub trials: Vec<TrialOutcome>,
    pub aggregates: Vec<AggregateRow>,
}

impl SweepResult {
    pub fn records(&self) -> Vec<ExperimentRecord> {
        self.trials.iter().map(|t| t.record.clone()).collect()
    }
}

/// Runs every `(T, seed)` pair on a pool of `jobs` threads. Output order is
/// budget-major and independent of `jobs`.
pub fn sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let grid: Vec<(u64, u64)> = cfg
        .t_values
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let instances: Vec<SbmInstance> = cfg
        .seeds
        .iter()
        .map(|&s| build_instance(&cfg.params, instance_seed(cfg.master_seed, s)))
        .collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    let trials: Vec<TrialOutcome> = pool.install(|| {
        grid.par_iter()
            .map(|&(t, s)| {
                let pos = cfg.seeds.iter().position(|&x| x == s).expect("seed from grid");
                run_trial_on(&instances[pos], cfg.strategy, t, trial_seed(cfg.master_seed, t, s), s, cfg.wall_clock)
            })
            .collect::<Result<_>>()
    })?;
    let records: Vec<ExperimentRecord> = trials.iter().map(|t| t.record.clone()).collect();
    Ok(SweepResult {
        aggregates: aggregate(&records),
        trials,
    })
}

pub const RECORD_HEADER: [&str; 11] = ["n", "K", "p", "q", "T", "strategy", "algo", "seed", "epsilon", "failed", "runtime_ms"];
pub const AGGREGATE_HEADER: [&str; 11] = ["n", "K", "p", "q", "T", "strategy", "algo", "trials", "eps_mean", "eps_std", "eps_median"];

fn write_rows<W: Write, T: Serialize>(rows: &[T], header: &[&str], out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(out);
    if rows.is_empty() {
        wtr.write_record(header)?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_records_csv<W: Write>(records: &[ExperimentRecord], out: W) -> Result<()> {
    write_rows(records, &RECORD_HEADER, out)
}

pub fn write_aggregates_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    write_rows(rows, &AGGREGATE_HEADER, out)
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(Error::Parse(format!("unexpected record header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
