//! Command-line front end.
//!
//! Every subcommand reads an optional JSON run configuration (`--config`),
//! applies flag overrides, echoes the effective configuration into its
//! report, and writes CSV plus `report.json` into `--output` when given. With
//! no output directory the main CSV or text report goes to stdout.
//!
//! Exit codes: 0 success, 1 a checked inequality failed, 2 configuration or
//! I/O error.

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{self, ChannelRecord, KrausChannel, OutcomePartition, PartitionRecord};
use crate::dilation::{self, LINK_TOL};
use crate::error::Error;
use crate::filtering::{self, BatchSummary, SimulationConfig, SimulationError};
use crate::measures::{Direction, Measure};
use crate::reference;
use crate::report::serialize_f64;
use crate::states::{self, DensityMatrix, MatrixRecord};
use crate::verify::{self, Instance, InstanceSpace, PartitionMode, SearchSpace, Tolerances};

/// Stream of the seed reserved for generating channels and states, so it
/// never collides with trajectory streams `0..n`.
const GENERATOR_STREAM: u64 = u64::MAX;

/// Z-score for the batch sub-martingale check.
const BATCH_Z: f64 = 3.0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Model(#[from] Error),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

impl CliError {
    fn config(field: &str, message: impl ToString) -> Self {
        CliError::Config {
            field: field.to_string(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(Error::ReferenceDrift { .. }) => 1,
            _ => 2,
        }
    }
}

/// How to obtain the channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChannelSpec {
    /// The three-level counter-example channel.
    Reference,
    Random { n: usize, m: usize },
    File { path: PathBuf },
    Inline(ChannelRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateSpec {
    ReferenceRho,
    ReferenceSigma,
    MaximallyMixed,
    Basis { index: usize },
    Random { rank: usize },
    File { path: PathBuf },
    Inline(MatrixRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSpec {
    Singletons,
    Trivial,
    /// A uniformly random partition into this many nonempty blocks.
    Random { blocks: usize },
    /// One-based blocks, written like `1,3|2`.
    Label { label: String },
    Explicit(PartitionRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Random channels and states.
    Random,
    /// The three-level counter-example and random mixtures of its states.
    Counterexample,
}

/// The JSON run configuration. Every field is optional; flags override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<StateSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<StateSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<StateSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measure: Option<Measure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_values: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_values: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_mode: Option<PartitionMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "qfilter", version, about = "Quantum filter simulation and exact fidelity checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the true state and its filter; one trajectory or a batch.
    Simulate(SimulateArgs),
    /// Check a one-step inequality on random instances.
    Verify(VerifyArgs),
    /// Print the three-level trace-distance counter-example.
    Counterexample(CounterexampleArgs),
    /// Build the environment model and replay the purification argument.
    Dilate(DilateArgs),
    /// Run the checks over a grid of dimensions and partition sizes.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for CSV and report files.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Slack allowed on checked inequalities.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct InstanceArgs {
    /// Channel JSON file.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["n", "m"])]
    channel: Option<PathBuf>,
    /// System dimension of a random channel.
    #[arg(long)]
    n: Option<usize>,
    /// Number of Kraus operators of a random channel.
    #[arg(long)]
    m: Option<usize>,
    /// True initial state JSON file.
    #[arg(long, value_name = "FILE", conflicts_with = "state_rank")]
    state: Option<PathBuf>,
    /// Rank of a random true initial state.
    #[arg(long)]
    state_rank: Option<usize>,
    /// Initial estimate JSON file.
    #[arg(long, value_name = "FILE", conflicts_with = "estimate_rank")]
    estimate: Option<PathBuf>,
    /// Rank of a random initial estimate.
    #[arg(long)]
    estimate_rank: Option<usize>,
    /// `singletons`, `trivial`, `random:P` or one-based blocks like `1,3|2`.
    #[arg(long)]
    partition: Option<String>,
}

#[derive(Debug, Clone, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trajectories: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    measure: Option<Measure>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
    /// `singletons`, `trivial` or `random-non-trivial`.
    #[arg(long)]
    partition_mode: Option<PartitionMode>,
    #[arg(long, value_enum)]
    family: Option<Family>,
}

#[derive(Debug, Clone, Args)]
struct CounterexampleArgs {
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct DilateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    instance: InstanceArgs,
}

#[derive(Debug, Clone, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Counterexample(a) => counterexample(a),
        Command::Dilate(a) => dilate(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = read(path)?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::config("config", e))?
        }
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.tolerance.is_some() {
        cfg.tolerance = common.tolerance;
    }
    if let Some(t) = cfg.tolerance {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(CliError::config("tolerance", "must be a finite nonnegative number"));
        }
    }
    Ok(cfg)
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn apply_instance_flags(cfg: &mut RunConfig, a: &InstanceArgs) -> Result<(), CliError> {
    if let Some(path) = &a.channel {
        cfg.channel = Some(ChannelSpec::File { path: path.clone() });
    }
    if a.n.is_some() || a.m.is_some() {
        let (n0, m0) = match &cfg.channel {
            Some(ChannelSpec::Random { n, m }) => (*n, *m),
            _ => (3, 2),
        };
        cfg.channel = Some(ChannelSpec::Random {
            n: a.n.unwrap_or(n0),
            m: a.m.unwrap_or(m0),
        });
    }
    if let Some(path) = &a.state {
        cfg.state = Some(StateSpec::File { path: path.clone() });
    }
    if let Some(rank) = a.state_rank {
        cfg.state = Some(StateSpec::Random { rank });
    }
    if let Some(path) = &a.estimate {
        cfg.estimate = Some(StateSpec::File { path: path.clone() });
    }
    if let Some(rank) = a.estimate_rank {
        cfg.estimate = Some(StateSpec::Random { rank });
    }
    if let Some(p) = &a.partition {
        cfg.partition = Some(parse_partition_flag(p)?);
    }
    Ok(())
}

fn parse_partition_flag(s: &str) -> Result<PartitionSpec, CliError> {
    match s {
        "singletons" => Ok(PartitionSpec::Singletons),
        "trivial" => Ok(PartitionSpec::Trivial),
        _ => {
            if let Some(p) = s.strip_prefix("random:") {
                let blocks = p
                    .parse()
                    .map_err(|_| CliError::config("partition", format!("bad block count `{p}`")))?;
                Ok(PartitionSpec::Random { blocks })
            } else {
                Ok(PartitionSpec::Label { label: s.to_string() })
            }
        }
    }
}

fn parse_label(label: &str, m: usize) -> Result<OutcomePartition, CliError> {
    let blocks = label
        .split('|')
        .map(|b| {
            b.split(',')
                .map(|i| i.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::config("partition", format!("`{label}`: {e}")))?;
    OutcomePartition::from_one_based(m, &blocks).map_err(|e| CliError::config("partition", e))
}

fn uses_randomness(cfg: &RunConfig) -> bool {
    matches!(cfg.channel, Some(ChannelSpec::Random { .. }))
        || [&cfg.state, &cfg.estimate, &cfg.fallback]
            .iter()
            .any(|s| matches!(s, Some(StateSpec::Random { .. })))
        || matches!(cfg.partition, Some(PartitionSpec::Random { .. }))
}

fn require_seed(cfg: &RunConfig) -> Result<u64, CliError> {
    cfg.seed
        .ok_or_else(|| CliError::config("seed", "required for randomized commands (use --seed)"))
}

/// Materializes the channel, states and partition from the specs, drawing
/// random pieces in that order from the generator stream.
struct Resolved {
    channel: KrausChannel,
    state: DensityMatrix,
    estimate: DensityMatrix,
    fallback: Option<DensityMatrix>,
    partition: OutcomePartition,
}

fn resolve(cfg: &RunConfig) -> Result<Resolved, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    rng.set_stream(GENERATOR_STREAM);
    let channel = match cfg.channel.as_ref().unwrap_or(&ChannelSpec::Reference) {
        ChannelSpec::Reference => reference::channel(),
        ChannelSpec::Random { n, m } => {
            if *n == 0 || *m == 0 {
                return Err(CliError::config("channel", "n and m must be positive"));
            }
            channels::random_channel(*n, *m, &mut rng).map_err(|e| CliError::config("channel", e))?
        }
        ChannelSpec::File { path } => {
            serde_json::from_str(&read(path)?).map_err(|e| CliError::config("channel", e))?
        }
        ChannelSpec::Inline(record) => {
            KrausChannel::try_from(record.clone()).map_err(|e| CliError::config("channel", e))?
        }
    };
    let n = channel.dim();
    let mut state = |field: &str, spec: &StateSpec| -> Result<DensityMatrix, CliError> {
        let bad = |e: Error| CliError::config(field, e);
        let d = match spec {
            StateSpec::ReferenceRho => reference::rho(),
            StateSpec::ReferenceSigma => reference::sigma(),
            StateSpec::MaximallyMixed => states::maximally_mixed(n).map_err(bad)?,
            StateSpec::Basis { index } => DensityMatrix::basis(n, *index).map_err(bad)?,
            StateSpec::Random { rank } => states::random_density(n, *rank, &mut rng).map_err(bad)?,
            StateSpec::File { path } => {
                serde_json::from_str(&read(path)?).map_err(|e| CliError::config(field, e))?
            }
            StateSpec::Inline(record) => DensityMatrix::try_from(record.clone()).map_err(bad)?,
        };
        if d.dim() != n {
            return Err(CliError::config(
                field,
                format!("dimension {} does not match the channel dimension {n}", d.dim()),
            ));
        }
        Ok(d)
    };
    let true_state = state("state", cfg.state.as_ref().unwrap_or(&StateSpec::ReferenceRho))?;
    let estimate = state("estimate", cfg.estimate.as_ref().unwrap_or(&StateSpec::ReferenceSigma))?;
    let fallback = cfg.fallback.as_ref().map(|s| state("fallback", s)).transpose()?;
    let m = channel.len();
    let partition = match cfg.partition.as_ref().unwrap_or(&PartitionSpec::Singletons) {
        PartitionSpec::Singletons => OutcomePartition::singletons(m),
        PartitionSpec::Trivial => OutcomePartition::trivial(m),
        PartitionSpec::Random { blocks } => {
            OutcomePartition::random(m, *blocks, &mut rng).map_err(|e| CliError::config("partition", e))?
        }
        PartitionSpec::Label { label } => parse_label(label, m)?,
        PartitionSpec::Explicit(record) => {
            if record.m != m {
                return Err(CliError::config(
                    "partition",
                    format!("covers {} outcomes but the channel has {m}", record.m),
                ));
            }
            OutcomePartition::try_from(record.clone()).map_err(|e| CliError::config("partition", e))?
        }
    };
    Ok(Resolved {
        channel,
        state: true_state,
        estimate,
        fallback,
        partition,
    })
}

/// Writes `bytes` to `dir/name`, or to stdout without a directory.
fn emit(dir: Option<&Path>, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    match dir {
        Some(dir) => write_file(dir, name, bytes),
        None => {
            use std::io::Write;
            io::stdout()
                .write_all(bytes)
                .map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'static str,
    config: &'a RunConfig,
    passed: bool,
    results: T,
}

fn write_report<T: Serialize>(
    dir: Option<&Path>,
    command: &'static str,
    config: &RunConfig,
    passed: bool,
    results: T,
) -> Result<(), CliError> {
    if let Some(dir) = dir {
        let report = Report {
            command,
            config,
            passed,
            results,
        };
        let mut text = serde_json::to_string_pretty(&report).expect("reports serialize");
        text.push('\n');
        write_file(dir, "report.json", text.as_bytes())?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<bool, CliError> {
    let mut cfg = load_config(&a.common)?;
    apply_instance_flags(&mut cfg, &a.instance)?;
    cfg.channel.get_or_insert(ChannelSpec::Random { n: 3, m: 2 });
    let n_default = match &cfg.channel {
        Some(ChannelSpec::Random { n, .. }) => *n,
        _ => 3,
    };
    cfg.state.get_or_insert(StateSpec::Random { rank: n_default });
    cfg.estimate.get_or_insert(StateSpec::MaximallyMixed);
    cfg.partition.get_or_insert(PartitionSpec::Singletons);
    if a.steps.is_some() {
        cfg.steps = a.steps;
    }
    if a.trajectories.is_some() {
        cfg.trajectories = a.trajectories;
    }
    let steps = *cfg.steps.get_or_insert(10);
    let trajectories = *cfg.trajectories.get_or_insert(1);
    if trajectories == 0 {
        return Err(CliError::config("trajectories", "must be at least 1"));
    }
    let seed = require_seed(&cfg)?;
    let r = resolve(&cfg)?;
    let mut sim = SimulationConfig::new(r.channel, r.state, r.estimate, steps, seed).with_partition(r.partition);
    if let Some(xi) = r.fallback {
        sim = sim.with_fallback(xi);
    }
    sim.validate().map_err(|e| CliError::config("config", e))?;
    let out = a.common.output.as_deref();

    if trajectories == 1 {
        let traj = match filtering::simulate(&sim) {
            Ok(t) => t,
            Err(e) => {
                if let (Some(dir), Some(partial)) = (out, &e.partial) {
                    write_file(dir, "trajectory.partial.csv", partial.to_csv_string().as_bytes())?;
                }
                return Err(e.into());
            }
        };
        emit(out, "trajectory.csv", traj.to_csv_string().as_bytes())?;
        #[derive(Serialize)]
        struct Results {
            fingerprint: String,
            rows: usize,
            fallback_steps: usize,
        }
        let results = Results {
            fingerprint: traj.fingerprint.clone(),
            rows: traj.len(),
            fallback_steps: traj.steps.iter().filter(|s| s.fallback_used).count(),
        };
        write_report(out, "simulate", &cfg, true, results)?;
        return Ok(true);
    }

    let summary = BatchSummary::collect(&sim, trajectories)?;
    let mut csv = Vec::new();
    summary.write_csv(&mut csv).expect("writing to memory");
    emit(out, "summary.csv", &csv)?;
    let violations = summary.submartingale_violations(BATCH_Z);
    let passed = violations.is_empty();
    #[derive(Serialize)]
    struct Results {
        fingerprint: String,
        trajectories: usize,
        z: f64,
        submartingale_violations: Vec<usize>,
    }
    let results = Results {
        fingerprint: sim.fingerprint(),
        trajectories,
        z: BATCH_Z,
        submartingale_violations: violations.clone(),
    };
    write_report(out, "simulate", &cfg, passed, results)?;
    if !passed {
        eprintln!("mean fidelity dropped by more than {BATCH_Z} standard errors at steps {violations:?}");
    }
    Ok(passed)
}

fn tolerances(cfg: &RunConfig) -> Tolerances {
    let mut tol = Tolerances::default();
    if let Some(t) = cfg.tolerance {
        tol.gap = t;
        tol.violation = t;
    }
    tol
}

#[derive(Serialize)]
struct VerifyResults {
    measure: Measure,
    trials: u64,
    /// Expected inequality is the theorem-backed sub-martingale property.
    theorem_backed: bool,
    rows: usize,
    violations: usize,
    #[serde(serialize_with = "serialize_f64")]
    min_gap: f64,
    #[serde(serialize_with = "serialize_f64")]
    max_gap: f64,
    #[serde(serialize_with = "serialize_f64")]
    max_mean_evolution_deviation: f64,
}

fn verify_cmd(a: VerifyArgs) -> Result<bool, CliError> {
    let mut cfg = load_config(&a.common)?;
    if a.measure.is_some() {
        cfg.measure = a.measure;
    }
    if a.trials.is_some() {
        cfg.trials = a.trials;
    }
    if a.n_values.is_some() {
        cfg.n_values = a.n_values;
    }
    if a.m_values.is_some() {
        cfg.m_values = a.m_values;
    }
    if a.partition_mode.is_some() {
        cfg.partition_mode = a.partition_mode;
    }
    if a.family.is_some() {
        cfg.family = a.family;
    }
    let measure = *cfg.measure.get_or_insert(Measure::Fidelity);
    let trials = *cfg.trials.get_or_insert(1000);
    let family = *cfg.family.get_or_insert(Family::Random);
    let default_mode = match measure {
        Measure::Fidelity => PartitionMode::RandomNonTrivial,
        _ => PartitionMode::Singletons,
    };
    let mode = *cfg.partition_mode.get_or_insert(default_mode);
    let seed = require_seed(&cfg)?;
    let tol = tolerances(&cfg);
    let space = match family {
        Family::Random => {
            let n_values = cfg.n_values.get_or_insert_with(|| vec![2, 3, 4]).clone();
            let m_values = cfg.m_values.get_or_insert_with(|| vec![2, 3, 4]).clone();
            SearchSpace::Random(
                InstanceSpace::new(n_values, m_values, mode).map_err(|e| CliError::config("n_values", e))?,
            )
        }
        Family::Counterexample => SearchSpace::CounterexampleFamily,
    };

    let per_trial: Vec<(Vec<verify::GapReport>, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<_, Error> {
            let inst = space.instance(seed, t)?;
            let mut rows = vec![verify::check_filter_step(&inst, measure, &tol)?];
            if measure == Measure::Fidelity {
                rows.push(verify::check_kraus_monotonicity_with(
                    &inst.channel,
                    &inst.sigma,
                    &inst.rho,
                    &tol,
                )?);
            }
            let fine = verify::check_mean_evolution(&inst.channel, &inst.rho, &inst.channel.singletons())?;
            let coarse = verify::check_mean_evolution(&inst.channel, &inst.rho, &inst.partition)?;
            Ok((rows, fine.max(coarse)))
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut max_dev = 0.0_f64;
    for (t, (reports, dev)) in per_trial.into_iter().enumerate() {
        max_dev = max_dev.max(dev);
        rows.extend(reports.into_iter().map(|r| (t as u64, r)));
    }
    let mut csv = Vec::new();
    verify::write_gap_csv(&rows, &mut csv).expect("writing to memory");
    emit(a.common.output.as_deref(), "gaps.csv", &csv)?;

    let violations = rows.iter().filter(|(_, r)| r.violation).count();
    let gaps = rows.iter().map(|(_, r)| r.gap).filter(|g| !g.is_nan());
    let theorem_backed = measure.direction() == Direction::Sub;
    let mean_ok = max_dev <= tol.mean_evolution;
    let passed = mean_ok && (!theorem_backed || violations == 0);
    let results = VerifyResults {
        measure,
        trials,
        theorem_backed,
        rows: rows.len(),
        violations,
        min_gap: gaps.clone().fold(f64::INFINITY, f64::min),
        max_gap: gaps.fold(f64::NEG_INFINITY, f64::max),
        max_mean_evolution_deviation: max_dev,
    };
    write_report(a.common.output.as_deref(), "verify", &cfg, passed, results)?;
    let kind = if theorem_backed { "failures" } else { "violations found" };
    eprintln!("{measure}: {violations} {kind} over {trials} instances, max mean-evolution deviation {max_dev:.3e}");
    Ok(passed)
}

fn counterexample(a: CounterexampleArgs) -> Result<bool, CliError> {
    let report = verify::counterexample_report()?;
    let text = report.render();
    print!("{text}");
    if let Some(dir) = a.output.as_deref() {
        write_file(dir, "counterexample.txt", text.as_bytes())?;
        write_report(Some(dir), "counterexample", &RunConfig::default(), true, &report)?;
    }
    Ok(true)
}

fn dilate(a: DilateArgs) -> Result<bool, CliError> {
    let mut cfg = load_config(&a.common)?;
    apply_instance_flags(&mut cfg, &a.instance)?;
    let channel = cfg.channel.get_or_insert(ChannelSpec::Reference);
    let (state, estimate) = match channel {
        ChannelSpec::Random { n, .. } => (StateSpec::Random { rank: *n }, StateSpec::Random { rank: *n }),
        ChannelSpec::Inline(r) => (StateSpec::Random { rank: r.dim }, StateSpec::Random { rank: r.dim }),
        _ => (StateSpec::ReferenceRho, StateSpec::ReferenceSigma),
    };
    cfg.state.get_or_insert(state);
    cfg.estimate.get_or_insert(estimate);
    cfg.partition.get_or_insert(PartitionSpec::Singletons);
    if uses_randomness(&cfg) {
        require_seed(&cfg)?;
    }
    let link_tol = cfg.tolerance.unwrap_or(LINK_TOL);
    let r = resolve(&cfg)?;
    let dil = dilation::stinespring(&r.channel)?;
    let unitarity_deviation = dil.unitarity_deviation();
    let roundtrip_error = dil.roundtrip_error(&r.channel)?;
    let replay = dilation::replay_proof_with(
        &r.channel,
        &r.estimate,
        &r.state,
        &r.partition,
        r.fallback.as_ref(),
        link_tol,
    )?;
    let dilation_ok = unitarity_deviation <= 1e-12 && roundtrip_error <= 1e-12;
    let passed = dilation_ok && replay.all_links_hold;

    let mut text = format!(
        "environment model: n = {}, m = {}, unitary {}x{}\n  unitarity deviation {:.3e}\n  recovered operator error {:.3e}\n",
        dil.system_dim(),
        dil.environment_dim(),
        dil.unitary().nrows(),
        dil.unitary().ncols(),
        unitarity_deviation,
        roundtrip_error
    );
    text.push_str(&replay.render());
    emit(a.common.output.as_deref(), "replay.txt", text.as_bytes())?;

    #[derive(Serialize)]
    struct Results<'a> {
        unitarity_deviation: f64,
        roundtrip_error: f64,
        unitary: MatrixRecord,
        replay: &'a dilation::ProofReplayReport,
    }
    let results = Results {
        unitarity_deviation,
        roundtrip_error,
        unitary: MatrixRecord::from_matrix(dil.unitary()),
        replay: &replay,
    };
    write_report(a.common.output.as_deref(), "dilate", &cfg, passed, results)?;
    Ok(passed)
}

pub const SWEEP_CSV_HEADER: &str = "n,m,blocks,trials,min_fidelity_gap,min_kraus_gap,max_mean_deviation,trace_distance_violations,frobenius_violations,replay_failures";

#[derive(Debug, Clone, Serialize)]
struct SweepCell {
    n: usize,
    m: usize,
    blocks: usize,
    trials: u64,
    min_fidelity_gap: f64,
    min_kraus_gap: f64,
    max_mean_deviation: f64,
    trace_distance_violations: usize,
    frobenius_violations: usize,
    replay_failures: usize,
}

struct TrialOutcome {
    fidelity_gap: f64,
    kraus_gap: f64,
    mean_deviation: f64,
    trace_distance_violation: bool,
    frobenius_violation: bool,
    replay_ok: bool,
}

fn sweep_trial(inst: &Instance, tol: &Tolerances) -> Result<TrialOutcome, Error> {
    let fid = verify::check_filter_step(inst, Measure::Fidelity, tol)?;
    let kraus = verify::check_kraus_monotonicity_with(&inst.channel, &inst.sigma, &inst.rho, tol)?;
    let td = verify::check_filter_step(inst, Measure::TraceDistance, tol)?;
    let fro = verify::check_filter_step(inst, Measure::Frobenius, tol)?;
    let replay = dilation::replay_proof(&inst.channel, &inst.sigma, &inst.rho, &inst.partition)?;
    Ok(TrialOutcome {
        fidelity_gap: fid.gap,
        kraus_gap: kraus.gap,
        mean_deviation: verify::check_mean_evolution(&inst.channel, &inst.rho, &inst.partition)?,
        trace_distance_violation: td.violation,
        frobenius_violation: fro.violation,
        replay_ok: replay.all_links_hold,
    })
}

fn sweep(a: SweepArgs) -> Result<bool, CliError> {
    let mut cfg = load_config(&a.common)?;
    if a.trials.is_some() {
        cfg.trials = a.trials;
    }
    if a.n_values.is_some() {
        cfg.n_values = a.n_values;
    }
    if a.m_values.is_some() {
        cfg.m_values = a.m_values;
    }
    let trials = *cfg.trials.get_or_insert(100);
    let n_values = cfg.n_values.get_or_insert_with(|| vec![2, 3, 4]).clone();
    let m_values = cfg.m_values.get_or_insert_with(|| vec![2, 3, 4]).clone();
    let seed = require_seed(&cfg)?;
    let tol = tolerances(&cfg);

    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for &n in &n_values {
        for &m in &m_values {
            let space = InstanceSpace::new(vec![n], vec![m], PartitionMode::Singletons)
                .map_err(|e| CliError::config("n_values", e))?;
            for blocks in 1..=m {
                let base = cell_index * trials;
                let outcomes: Vec<TrialOutcome> = (0..trials)
                    .into_par_iter()
                    .map(|t| -> Result<_, Error> {
                        let inst = space.sample(seed, base + t)?;
                        let partition = if blocks == m {
                            OutcomePartition::singletons(m)
                        } else {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(GENERATOR_STREAM - 1 - (base + t));
                            OutcomePartition::random(m, blocks, &mut rng)?
                        };
                        sweep_trial(&inst.with_partition(partition), &tol)
                    })
                    .collect::<Result<_, _>>()?;
                cells.push(SweepCell {
                    n,
                    m,
                    blocks,
                    trials,
                    min_fidelity_gap: outcomes.iter().map(|o| o.fidelity_gap).fold(f64::INFINITY, f64::min),
                    min_kraus_gap: outcomes.iter().map(|o| o.kraus_gap).fold(f64::INFINITY, f64::min),
                    max_mean_deviation: outcomes.iter().map(|o| o.mean_deviation).fold(0.0, f64::max),
                    trace_distance_violations: outcomes.iter().filter(|o| o.trace_distance_violation).count(),
                    frobenius_violations: outcomes.iter().filter(|o| o.frobenius_violation).count(),
                    replay_failures: outcomes.iter().filter(|o| !o.replay_ok).count(),
                });
                cell_index += 1;
            }
        }
    }

    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.n,
            c.m,
            c.blocks,
            c.trials,
            crate::report::fmt_f64(c.min_fidelity_gap),
            crate::report::fmt_f64(c.min_kraus_gap),
            crate::report::fmt_f64(c.max_mean_deviation),
            c.trace_distance_violations,
            c.frobenius_violations,
            c.replay_failures,
        ));
    }
    emit(a.common.output.as_deref(), "sweep.csv", csv.as_bytes())?;
    let passed = cells.iter().all(|c| {
        c.min_fidelity_gap >= -tol.gap
            && c.min_kraus_gap >= -tol.gap
            && c.max_mean_deviation <= tol.mean_evolution
            && c.replay_failures == 0
    });
    write_report(a.common.output.as_deref(), "sweep", &cfg, passed, &cells)?;
    Ok(passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_flags() {
        assert!(matches!(parse_partition_flag("trivial").unwrap(), PartitionSpec::Trivial));
        assert!(matches!(
            parse_partition_flag("random:2").unwrap(),
            PartitionSpec::Random { blocks: 2 }
        ));
        assert!(parse_partition_flag("random:x").is_err());
        let p = parse_label("1,3|2", 3).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 2], vec![1]]);
        assert!(parse_label("1|2", 3).is_err());
        assert!(parse_label("1,a", 3).is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = r#"{
            "seed": 3,
            "channel": {"kind": "random", "n": 2, "m": 3},
            "state": {"kind": "inline", "dim": 2, "re": [[0.5, 0], [0, 0.5]]},
            "estimate": {"kind": "basis", "index": 1},
            "partition": {"kind": "explicit", "m": 3, "blocks": [[1, 2], [3]]},
            "measure": "trace-distance",
            "partition_mode": "random-non-trivial"
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        let r = resolve(&cfg).unwrap();
        assert_eq!(r.channel.dim(), 2);
        assert_eq!(r.partition.label(), "1,2|3");
        assert_eq!(r.estimate, DensityMatrix::basis(2, 1).unwrap());
        let echoed = serde_json::to_string(&cfg).unwrap();
        let again: RunConfig = serde_json::from_str(&echoed).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), echoed);
    }

    #[test]
    fn unknown_config_field_names_the_field() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sead"));
    }

    #[test]
    fn dimension_conflict_is_a_config_error() {
        let cfg = RunConfig {
            channel: Some(ChannelSpec::Random { n: 2, m: 2 }),
            state: Some(StateSpec::ReferenceRho),
            seed: Some(1),
            ..RunConfig::default()
        };
        match resolve(&cfg) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "state"),
            other => panic!("{other:?}", other = other.err()),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["qfilter", "counterexample"]), 0);
        assert_eq!(run(["qfilter", "bogus"]), 2);
        assert_eq!(run(["qfilter", "verify", "--trials", "3"]), 2);
        assert_eq!(run(["qfilter", "--help"]), 0);
    }
}
