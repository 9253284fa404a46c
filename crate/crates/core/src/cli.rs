//! Command-line front end. Flags override `key = value` config files; every
//! run echoes its resolved configuration to stderr. Primary outputs depend
//! only on the arguments; timings go to a `<out>.log` sidecar.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};

use crate::adaptive::write_audit_csv;
use crate::bounds::condition_report;
use crate::error::{Error, Result};
use crate::eval::{
    instance_seed, replay_trial, run_asp_trial, run_trial_on, sweep, trial_observations, trial_seed,
    write_aggregates_csv, write_records_csv, ExperimentConfig, Strategy, TrialOutcome,
};
use crate::model::{build_instance, pair_count, SbmInstance, SbmParams};
use crate::sampling::ObservationStore;

pub const LOG_ENV: &str = "BUDGETED_COMMUNITIES_LOG";

#[derive(Debug, Parser)]
#[command(name = "budgeted-communities", version, about = "Community detection under an observation budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Draw a network and print its community assignment.
    Instance,
    /// Draw non-adaptive observations and print them as CSV.
    Sample,
    /// Non-adaptive sampling followed by spectral partitioning.
    Sp,
    /// Adaptive kernel-based partitioning.
    Asp,
    /// Evaluate the closed-form error bounds.
    Bounds,
    /// Run a budget-by-seed grid and print per-trial and aggregate CSV.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Instance => "instance",
            Command::Sample => "sample",
            Command::Sp => "sp",
            Command::Asp => "asp",
            Command::Bounds => "bounds",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        <Format as ValueEnum>::from_str(s, true).map_err(|_| Error::Parse(format!("unknown format {s:?} (expected text or csv)")))
    }
}

#[derive(Debug, Clone, Default, Args)]
struct Flags {
    /// Number of nodes.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Number of communities (default 2, or the length of --alphas).
    #[arg(long = "K", visible_alias = "k", global = true)]
    k: Option<usize>,
    /// Intra-community interaction probability.
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Inter-community interaction probability.
    #[arg(long, global = true)]
    q: Option<f64>,
    /// Comma-separated community fractions (default equal sizes).
    #[arg(long, global = true)]
    alphas: Option<String>,
    /// Budget: an integer, `full` for n(n-1)/2, or a comma-separated list for sweeps.
    #[arg(long = "T", visible_alias = "t", global = true)]
    t: Option<String>,
    /// Sampling strategy: urs1, urs2 or asp.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Master seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seed indices in a sweep (default 1).
    #[arg(long, global = true)]
    seeds: Option<u64>,
    /// Worker threads for sweeps (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output path (default stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output format of `bounds`.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Fill the runtime_ms column.
    #[arg(long = "wall-clock", global = true)]
    wall_clock: bool,
    /// Write the per-node ASP classification audit CSV here.
    #[arg(long, global = true)]
    audit: Option<PathBuf>,
    /// Cluster stored observations (CSV from `sample`) instead of sampling.
    #[arg(long, global = true)]
    observations: Option<PathBuf>,
    /// Write estimated labels, one per line, here.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
}

const CONFIG_KEYS: [&str; 17] = [
    "n", "K", "p", "q", "alphas", "T", "strategy", "seed", "seeds", "jobs", "out", "format", "wall_clock", "audit",
    "observations", "labels", "config",
];

/// Parsed `key = value` file. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = canonical_key(key.trim())
                .ok_or_else(|| Error::Parse(format!("config line {}: unknown key {:?}", i + 1, key.trim())))?;
            if key == "config" {
                return Err(Error::Parse(format!("config line {}: nested config files are not supported", i + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| io::Error::new(e.kind(), format!("config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Parse(format!("config key {key}: {e}"))))
            .transpose()
    }
}

fn canonical_key(key: &str) -> Option<&'static str> {
    let key = match key {
        "k" => "K",
        "t" => "T",
        "wall-clock" => "wall_clock",
        other => other,
    };
    CONFIG_KEYS.iter().copied().find(|&k| k == key)
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| Error::Parse(format!("{what} entry {:?}: {e}", x.trim()))))
        .collect()
}

/// Budget value: integer, `full`, or an exactly integral float such as `1.5e6`.
pub fn parse_budget(s: &str, n: Option<usize>) -> Result<u64> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("full") {
        let n = n.ok_or_else(|| Error::InvalidParams("`T = full` needs n".into()))?;
        return Ok(pair_count(n));
    }
    if let Ok(t) = s.parse::<u64>() {
        return Ok(t);
    }
    match s.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(63) => Ok(x as u64),
        _ => Err(Error::Parse(format!("budget {s:?} is not a non-negative integer or `full`"))),
    }
}

/// Flags merged over the config file, before command-specific checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub n: Option<usize>,
    pub k: usize,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub budgets: Option<Vec<u64>>,
    pub strategy: Option<Strategy>,
    pub seed: u64,
    pub seeds: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub wall_clock: bool,
    pub audit: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

fn resolve(flags: &Flags, command: Command) -> Result<Resolved> {
    let cfg = match &flags.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let n = flags.n.or(cfg.parsed("n")?);
    let alphas = match flags.alphas.as_deref().or(cfg.get("alphas")) {
        Some(s) => Some(parse_list::<f64>(s, "alphas")?),
        None => None,
    };
    let budgets = match flags.t.as_deref().or(cfg.get("T")) {
        Some(s) => Some(s.split(',').map(|b| parse_budget(b, n)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let strategy = match flags.strategy.as_deref().or(cfg.get("strategy")) {
        Some(s) => Some(s.parse::<Strategy>()?),
        None => match command {
            Command::Asp => Some(Strategy::Asp),
            Command::Sample | Command::Sp | Command::Sweep => Some(Strategy::Urs1),
            Command::Instance | Command::Bounds => None,
        },
    };
    let k = match (flags.k.or(cfg.parsed("K")?), &alphas) {
        (Some(k), Some(a)) if k != a.len() => {
            return Err(Error::InvalidParams(format!("--K {k} disagrees with {} fractions", a.len())));
        }
        (_, Some(a)) => a.len(),
        (k, None) => k.unwrap_or(2),
    };
    let wall_clock = flags.wall_clock || cfg.parsed::<bool>("wall_clock")?.unwrap_or(false);
    let default_jobs = std::thread::available_parallelism().map_or(1, |j| j.get());
    Ok(Resolved {
        n,
        k,
        p: flags.p.or(cfg.parsed("p")?),
        q: flags.q.or(cfg.parsed("q")?),
        alphas,
        budgets,
        strategy,
        seed: flags.seed.or(cfg.parsed("seed")?).unwrap_or(0),
        seeds: flags.seeds.or(cfg.parsed("seeds")?).unwrap_or(1),
        jobs: flags.jobs.or(cfg.parsed("jobs")?).unwrap_or(default_jobs),
        out: flags.out.clone().or(cfg.parsed("out")?),
        format: flags.format.or(cfg.parsed("format")?).unwrap_or(Format::Text),
        wall_clock,
        audit: flags.audit.clone().or(cfg.parsed("audit")?),
        observations: flags.observations.clone().or(cfg.parsed("observations")?),
        labels: flags.labels.clone().or(cfg.parsed("labels")?),
    })
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "-".to_string(), T::to_string)
}

fn show_path(x: &Option<PathBuf>) -> String {
    x.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

impl fmt::Display for Resolved {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} K={} p={} q={} alphas={} T={} strategy={} seed={} seeds={} jobs={} format={} wall_clock={} out={} audit={} observations={} labels={}",
            show(&self.n),
            self.k,
            show(&self.p),
            show(&self.q),
            self.alphas.as_deref().map_or_else(|| "-".to_string(), join),
            self.budgets.as_deref().map_or_else(|| "-".to_string(), join),
            self.strategy.map_or("-", Strategy::name),
            self.seed,
            self.seeds,
            self.jobs,
            match self.format {
                Format::Text => "text",
                Format::Csv => "csv",
            },
            self.wall_clock,
            show_path(&self.out),
            show_path(&self.audit),
            show_path(&self.observations),
            show_path(&self.labels),
        )
    }
}

impl Resolved {
    fn require<T: Copy>(x: Option<T>, flag: &str) -> Result<T> {
        x.ok_or_else(|| Error::InvalidParams(format!("missing --{flag}")))
    }

    pub fn params(&self) -> Result<SbmParams> {
        let n = Self::require(self.n, "n")?;
        let p = Self::require(self.p, "p")?;
        let q = Self::require(self.q, "q")?;
        match &self.alphas {
            Some(a) => SbmParams::new(n, self.k, a.clone(), p, q),
            None => SbmParams::equal_sizes(n, self.k, p, q),
        }
    }

    fn single_budget(&self) -> Result<u64> {
        match self.budgets.as_deref() {
            Some([t]) => Ok(*t),
            Some(_) => Err(Error::InvalidParams("this command takes a single budget".into())),
            None => Err(Error::InvalidParams("missing --T".into())),
        }
    }

    fn non_adaptive_strategy(&self) -> Result<Strategy> {
        match self.strategy.unwrap_or(Strategy::Urs1) {
            Strategy::Asp => Err(Error::InvalidParams("use the `asp` command for adaptive sampling".into())),
            s => Ok(s),
        }
    }

    fn instance(&self) -> Result<SbmInstance> {
        build_instance(&self.params()?, instance_seed(self.seed, 0))
    }
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn records_csv(trials: &[&TrialOutcome]) -> Result<Vec<u8>> {
    let records: Vec<_> = trials.iter().map(|t| t.record.clone()).collect();
    let mut buf = Vec::new();
    write_records_csv(&records, &mut buf)?;
    Ok(buf)
}

fn write_labels(path: &Option<PathBuf>, trial: &TrialOutcome) -> Result<()> {
    if let (Some(path), Some(est)) = (path, &trial.estimate) {
        let text: String = est.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(path, text)?;
    }
    Ok(())
}

/// A failed single trial is still written, then reported as a runtime error.
fn trial_status(trial: &TrialOutcome) -> Result<()> {
    match &trial.diagnostics.error {
        Some(msg) if trial.diagnostics.budget_too_small => Err(Error::BudgetTooSmall(msg.clone())),
        Some(msg) if trial.record.failed => Err(Error::Degenerate(msg.clone())),
        _ => Ok(()),
    }
}

fn log_trial(trial: &TrialOutcome, sidecar: &mut Vec<String>) {
    let d = &trial.diagnostics;
    debug!(
        "T={} seed={} epsilon={:?} trimmed={:?} p_hat={:?} q_hat={:?} random={:?} consumed={:?} error={:?}",
        trial.record.t, trial.record.seed, trial.record.epsilon, d.trimmed_fraction, d.p_hat, d.q_hat,
        d.randomly_assigned, d.consumed, d.error
    );
    sidecar.push(format!("trial T={} seed={} elapsed_ms={:.3}", trial.record.t, trial.record.seed, d.elapsed_ms));
}

fn execute(command: Command, r: &Resolved, sidecar: &mut Vec<String>) -> Result<()> {
    match command {
        Command::Instance => emit(&r.out, r.instance()?.to_text().as_bytes()),
        Command::Sample => {
            let strategy = r.non_adaptive_strategy()?;
            let t = r.single_budget()?;
            let store = trial_observations(&r.instance()?, strategy, t, trial_seed(r.seed, t, 0))?;
            let mut buf = Vec::new();
            store.write_csv(&mut buf)?;
            emit(&r.out, &buf)
        }
        Command::Sp => {
            let strategy = r.non_adaptive_strategy()?;
            let inst = r.instance()?;
            let trial = match &r.observations {
                Some(path) => {
                    let store = ObservationStore::read_csv(fs::File::open(path)?, inst.n())?;
                    let t = store.total_used();
                    if let Some(given) = r.budgets.as_deref() {
                        if given != [t] {
                            return Err(Error::InvalidParams(format!("stored observations use T = {t}, not {}", join(given))));
                        }
                    }
                    replay_trial(&inst, &store, strategy, trial_seed(r.seed, t, 0), 0, r.wall_clock)?
                }
                None => {
                    let t = r.single_budget()?;
                    run_trial_on(&inst, strategy, t, trial_seed(r.seed, t, 0), 0, r.wall_clock)?
                }
            };
            log_trial(&trial, sidecar);
            emit(&r.out, &records_csv(&[&trial])?)?;
            write_labels(&r.labels, &trial)?;
            trial_status(&trial)
        }
        Command::Asp => {
            if r.strategy.is_some_and(|s| s != Strategy::Asp) {
                return Err(Error::InvalidParams("the `asp` command only runs adaptive sampling".into()));
            }
            let inst = r.instance()?;
            let t = r.single_budget()?;
            let (trial, full) = run_asp_trial(&inst, t, trial_seed(r.seed, t, 0), 0, r.wall_clock)?;
            log_trial(&trial, sidecar);
            emit(&r.out, &records_csv(&[&trial])?)?;
            write_labels(&r.labels, &trial)?;
            if let (Some(path), Some(full)) = (&r.audit, &full) {
                write_audit_csv(full, fs::File::create(path)?)?;
            }
            trial_status(&trial)
        }
        Command::Bounds => {
            let params = r.params()?;
            let report = condition_report(params.n, r.single_budget()?, params.p, params.q, &params.alphas)?;
            let text = match r.format {
                Format::Text => report.to_text(),
                Format::Csv => report.to_csv(),
            };
            emit(&r.out, text.as_bytes())
        }
        Command::Sweep => {
            let cfg = ExperimentConfig {
                params: r.params()?,
                strategy: r.strategy.unwrap_or(Strategy::Urs1),
                t_values: r.budgets.clone().ok_or_else(|| Error::InvalidParams("missing --T".into()))?,
                seeds: (0..r.seeds).collect(),
                master_seed: r.seed,
                wall_clock: r.wall_clock,
            };
            let result = sweep(&cfg, r.jobs)?;
            for trial in &result.trials {
                log_trial(trial, sidecar);
            }
            let mut records = records_csv(&result.trials.iter().collect::<Vec<_>>())?;
            let mut aggregates = Vec::new();
            write_aggregates_csv(&result.aggregates, &mut aggregates)?;
            match &r.out {
                Some(path) => {
                    fs::write(path, &records)?;
                    fs::write(suffixed(path, ".aggregate.csv"), &aggregates)?;
                }
                None => {
                    records.push(b'\n');
                    records.extend_from_slice(&aggregates);
                    emit(&None, &records)?;
                }
            }
            Ok(())
        }
    }
}

fn init_logging() -> std::result::Result<(), String> {
    let level = match std::env::var(LOG_ENV).ok().as_deref().map(str::trim) {
        None | Some("") => log::LevelFilter::Warn,
        Some("quiet") => log::LevelFilter::Off,
        Some("info") => log::LevelFilter::Info,
        Some("debug") => log::LevelFilter::Debug,
        Some(other) => return Err(format!("{LOG_ENV}={other:?} is not one of quiet, info, debug")),
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    Ok(())
}

/// Exit code of one invocation: 0 success, 1 invalid input, 2 algorithm failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return 1;
    }
    let resolved = match resolve(&cli.flags, cli.command) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    eprintln!("{} {}", cli.command.name(), resolved);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let mut sidecar = Vec::new();
    let result = execute(cli.command, &resolved, &mut sidecar);
    let elapsed_ms = clock.elapsed().as_secs_f64() * 1e3;
    info!("{} finished in {elapsed_ms:.1} ms", cli.command.name());
    if let Some(out) = &resolved.out {
        let mut log = format!("command {}\nconfig {resolved}\nstarted_unix {started:.3}\nelapsed_ms {elapsed_ms:.3}\n", cli.command.name());
        for line in &sidecar {
            log.push_str(line);
            log.push('\n');
        }
        if let Err(e) = fs::write(suffixed(out, ".log"), log) {
            eprintln!("warning: could not write timing log: {e}");
        }
    }
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
