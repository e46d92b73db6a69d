//! The coupled chain `(ρ_k, ρ̂_k)`: the true state jumps at random, the
//! filter replays the observed jump index from its own estimate.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channels::{self, ChannelRecord, KrausChannel, OutcomePartition};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::measures;
use crate::report::fmt_f64;
use crate::states::{DensityMatrix, MatrixRecord};

/// Chooses the channel for step `k` from the current estimate only.
pub type FeedbackFn = dyn Fn(usize, &DensityMatrix) -> Result<KrausChannel> + Send + Sync;

/// Where the Kraus operators for step `k -> k + 1` come from.
#[derive(Clone)]
pub enum ChannelSource {
    Fixed(KrausChannel),
    /// `channels[k]` drives step `k`.
    PerStep(Vec<KrausChannel>),
    /// A pure function of `(k, ρ̂_k)`. The label identifies it in
    /// fingerprints.
    Feedback { label: String, select: Arc<FeedbackFn> },
}

impl fmt::Debug for ChannelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelSource::Fixed(ch) => f.debug_tuple("Fixed").field(ch).finish(),
            ChannelSource::PerStep(list) => f.debug_tuple("PerStep").field(&list.len()).finish(),
            ChannelSource::Feedback { label, .. } => {
                f.debug_struct("Feedback").field("label", label).finish_non_exhaustive()
            }
        }
    }
}

impl ChannelSource {
    fn channel_at(&self, k: usize, estimate: &DensityMatrix) -> Result<KrausChannel> {
        match self {
            ChannelSource::Fixed(ch) => Ok(ch.clone()),
            ChannelSource::PerStep(list) => list.get(k).cloned().ok_or_else(|| {
                Error::InvalidArgument(format!("no channel provided for step {k}"))
            }),
            ChannelSource::Feedback { select, .. } => select(k, estimate),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub channels: ChannelSource,
    pub initial_state: DensityMatrix,
    pub initial_estimate: DensityMatrix,
    pub steps: usize,
    pub partition: Option<OutcomePartition>,
    pub fallback: Option<DensityMatrix>,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(
        channel: KrausChannel,
        initial_state: DensityMatrix,
        initial_estimate: DensityMatrix,
        steps: usize,
        seed: u64,
    ) -> Self {
        Self {
            channels: ChannelSource::Fixed(channel),
            initial_state,
            initial_estimate,
            steps,
            partition: None,
            fallback: None,
            seed,
        }
    }

    pub fn with_partition(mut self, partition: OutcomePartition) -> Self {
        self.partition = Some(partition);
        self
    }

    pub fn with_fallback(mut self, fallback: DensityMatrix) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn dim(&self) -> usize {
        self.initial_state.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        self.initial_estimate.ensure_dim(n)?;
        if let Some(xi) = &self.fallback {
            xi.ensure_dim(n)?;
        }
        let check = |ch: &KrausChannel| -> Result<()> {
            if ch.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: ch.dim(),
                });
            }
            if let Some(p) = &self.partition {
                if p.outcomes() != ch.len() {
                    return Err(Error::InvalidPartition(format!(
                        "partition covers {} outcomes but the channel has {}",
                        p.outcomes(),
                        ch.len()
                    )));
                }
            }
            Ok(())
        };
        match &self.channels {
            ChannelSource::Fixed(ch) => check(ch)?,
            ChannelSource::PerStep(list) => {
                if list.len() < self.steps {
                    return Err(Error::InvalidArgument(format!(
                        "{} per-step channels for {} steps",
                        list.len(),
                        self.steps
                    )));
                }
                list.iter().try_for_each(check)?;
            }
            ChannelSource::Feedback { .. } => {}
        }
        Ok(())
    }

    /// Hash of everything that determines a trajectory except the stream.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            channels: serde_json::Value,
            initial_state: MatrixRecord,
            initial_estimate: MatrixRecord,
            steps: usize,
            partition: Option<&'a OutcomePartition>,
            fallback: Option<MatrixRecord>,
            seed: u64,
        }
        let channels = match &self.channels {
            ChannelSource::Fixed(ch) => serde_json::to_value(ChannelRecord::from(ch.clone())),
            ChannelSource::PerStep(list) => serde_json::to_value(
                list.iter()
                    .map(|c| ChannelRecord::from(c.clone()))
                    .collect::<Vec<_>>(),
            ),
            ChannelSource::Feedback { label, .. } => {
                serde_json::to_value(format!("feedback:{label}"))
            }
        }
        .expect("channel records serialize");
        let canonical = Canonical {
            channels,
            initial_state: self.initial_state.clone().into(),
            initial_estimate: self.initial_estimate.clone().into(),
            steps: self.steps,
            partition: self.partition.as_ref(),
            fallback: self.fallback.clone().map(Into::into),
            seed: self.seed,
        };
        fingerprint::of_json(&canonical)
    }
}

/// One record of the joint chain. `outcome` is the block index that led to
/// this step; `None` for `k = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointStep {
    pub k: usize,
    pub outcome: Option<usize>,
    pub true_state: DensityMatrix,
    pub estimate: DensityMatrix,
    pub fallback_used: bool,
}

impl JointStep {
    pub fn metrics(&self) -> Result<StepMetrics> {
        Ok(StepMetrics {
            fidelity: measures::fidelity(&self.estimate, &self.true_state)?,
            trace_distance: measures::trace_distance(&self.estimate, &self.true_state)?,
            frobenius: measures::frobenius_inner(&self.estimate, &self.true_state)?,
            purity_true: self.true_state.purity(),
            purity_estimate: self.estimate.purity(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub fidelity: f64,
    pub trace_distance: f64,
    pub frobenius: f64,
    pub purity_true: f64,
    pub purity_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub steps: Vec<JointStep>,
    pub fingerprint: String,
    pub seed: u64,
    /// ChaCha stream index of this trajectory within its batch.
    pub stream: u64,
}

pub const TRAJECTORY_CSV_HEADER: &str =
    "k,outcome,fidelity,trace_distance,frobenius,purity_true,purity_estimate,fallback_used";

impl JointTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One row per step; outcomes are one-based, empty for `k = 0`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
        for step in &self.steps {
            let m = step
                .metrics()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let outcome = step.outcome.map(|o| (o + 1).to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                step.k,
                outcome,
                fmt_f64(m.fidelity),
                fmt_f64(m.trace_distance),
                fmt_f64(m.frobenius),
                fmt_f64(m.purity_true),
                fmt_f64(m.purity_estimate),
                u8::from(step.fallback_used),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// A stopped simulation, with everything computed before the failure.
#[derive(Debug, Clone, thiserror::Error)]
#[error("simulation failed after {} steps: {error}", partial.as_ref().map_or(0, |t| t.steps.len()))]
pub struct SimulationError {
    #[source]
    pub error: Error,
    pub partial: Option<JointTrajectory>,
}

impl From<Error> for SimulationError {
    fn from(error: Error) -> Self {
        Self {
            error,
            partial: None,
        }
    }
}

/// Outcome of one step of the joint chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub outcome: usize,
    pub true_state: DensityMatrix,
    pub estimate: DensityMatrix,
    pub fallback_used: bool,
}

/// Uniform `[0, 1)` from the top 53 bits of one 64-bit draw.
fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Samples the outcome from the true state's distribution and applies the
/// same index to both states.
pub fn step_joint<R: RngCore + ?Sized>(
    channel: &KrausChannel,
    true_state: &DensityMatrix,
    estimate: &DensityMatrix,
    partition: &OutcomePartition,
    fallback: Option<&DensityMatrix>,
    rng: &mut R,
) -> Result<Transition> {
    let probs = channels::outcome_probs(channel, true_state, partition)?;
    let outcome = probs.sample_index(uniform(rng));
    let next_true = channels::conditional_update(channel, outcome, true_state, partition, None)?;
    let next_est = channels::conditional_update(channel, outcome, estimate, partition, fallback)?;
    Ok(Transition {
        outcome,
        true_state: next_true.state,
        estimate: next_est.state,
        fallback_used: next_est.used_fallback,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `step` on every transition without storing states.
fn drive(
    cfg: &SimulationConfig,
    stream: u64,
    mut visit: impl FnMut(JointStep) -> Result<()>,
) -> Result<()> {
    let mut rng = stream_rng(cfg.seed, stream);
    let mut rho = cfg.initial_state.clone();
    let mut est = cfg.initial_estimate.clone();
    visit(JointStep {
        k: 0,
        outcome: None,
        true_state: rho.clone(),
        estimate: est.clone(),
        fallback_used: false,
    })?;
    for k in 0..cfg.steps {
        let ch = cfg.channels.channel_at(k, &est)?;
        if ch.dim() != cfg.dim() {
            return Err(Error::DimensionMismatch {
                expected: cfg.dim(),
                found: ch.dim(),
            });
        }
        let singletons;
        let partition = match &cfg.partition {
            Some(p) => p,
            None => {
                singletons = ch.singletons();
                &singletons
            }
        };
        let t = step_joint(&ch, &rho, &est, partition, cfg.fallback.as_ref(), &mut rng)?;
        rho = t.true_state;
        est = t.estimate;
        visit(JointStep {
            k: k + 1,
            outcome: Some(t.outcome),
            true_state: rho.clone(),
            estimate: est.clone(),
            fallback_used: t.fallback_used,
        })?;
    }
    Ok(())
}

pub fn simulate(cfg: &SimulationConfig) -> std::result::Result<JointTrajectory, SimulationError> {
    simulate_stream(cfg, 0)
}

/// Trajectory on ChaCha stream `stream` of `cfg.seed`. Stream 0 is what
/// [`simulate`] uses.
pub fn simulate_stream(
    cfg: &SimulationConfig,
    stream: u64,
) -> std::result::Result<JointTrajectory, SimulationError> {
    cfg.validate()?;
    let mut traj = JointTrajectory {
        steps: Vec::with_capacity(cfg.steps + 1),
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        stream,
    };
    match drive(cfg, stream, |s| {
        traj.steps.push(s);
        Ok(())
    }) {
        Ok(()) => Ok(traj),
        Err(error) => Err(SimulationError {
            error,
            partial: Some(traj),
        }),
    }
}

/// `n_traj` trajectories, trajectory `i` on stream `i`. Output order and
/// content do not depend on the thread pool.
pub fn simulate_batch(
    cfg: &SimulationConfig,
    n_traj: usize,
) -> std::result::Result<Vec<JointTrajectory>, SimulationError> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("batch needs at least one trajectory".into()).into());
    }
    cfg.validate()?;
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| simulate_stream(cfg, i))
        .collect()
}

/// Per-step statistics over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub trajectories: usize,
    pub steps: Vec<StepSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepSummary {
    pub k: usize,
    pub mean_fidelity: f64,
    pub stderr_fidelity: f64,
    /// Mean of `F_k - F_{k-1}` over trajectories (0 at `k = 0`).
    pub mean_increment: f64,
    pub stderr_increment: f64,
    pub mean_trace_distance: f64,
    pub stderr_trace_distance: f64,
    pub mean_frobenius: f64,
    pub fallback_steps: usize,
}

pub const SUMMARY_CSV_HEADER: &str = "k,trajectories,mean_fidelity,stderr_fidelity,mean_increment,stderr_increment,mean_trace_distance,stderr_trace_distance,mean_frobenius,fallback_steps";

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    fid: (f64, f64),
    inc: (f64, f64),
    td: (f64, f64),
    fro: f64,
    fallbacks: usize,
}

impl Moments {
    fn add(&mut self, o: &Moments) {
        self.fid.0 += o.fid.0;
        self.fid.1 += o.fid.1;
        self.inc.0 += o.inc.0;
        self.inc.1 += o.inc.1;
        self.td.0 += o.td.0;
        self.td.1 += o.td.1;
        self.fro += o.fro;
        self.fallbacks += o.fallbacks;
    }
}

const SUMMARY_CHUNK: u64 = 256;

impl BatchSummary {
    /// Streams `n_traj` trajectories through per-step moment sums. Chunks of
    /// consecutive streams are reduced in index order, so the floating-point
    /// result is independent of scheduling.
    pub fn collect(cfg: &SimulationConfig, n_traj: usize) -> std::result::Result<Self, SimulationError> {
        if n_traj == 0 {
            return Err(Error::InvalidArgument("batch needs at least one trajectory".into()).into());
        }
        cfg.validate()?;
        let n = n_traj as u64;
        let chunks: Vec<u64> = (0..n.div_ceil(SUMMARY_CHUNK)).collect();
        let partials: Vec<Vec<Moments>> = chunks
            .par_iter()
            .map(|&c| {
                let mut acc = vec![Moments::default(); cfg.steps + 1];
                for stream in c * SUMMARY_CHUNK..((c + 1) * SUMMARY_CHUNK).min(n) {
                    let mut prev = f64::NAN;
                    drive(cfg, stream, |s| {
                        let m = s.metrics()?;
                        let inc = if s.k == 0 { 0.0 } else { m.fidelity - prev };
                        prev = m.fidelity;
                        let a = &mut acc[s.k];
                        a.fid.0 += m.fidelity;
                        a.fid.1 += m.fidelity * m.fidelity;
                        a.inc.0 += inc;
                        a.inc.1 += inc * inc;
                        a.td.0 += m.trace_distance;
                        a.td.1 += m.trace_distance * m.trace_distance;
                        a.fro += m.frobenius;
                        a.fallbacks += usize::from(s.fallback_used);
                        Ok(())
                    })?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;

        let mut total = vec![Moments::default(); cfg.steps + 1];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                t.add(p);
            }
        }
        let count = n_traj as f64;
        let mean_se = |(s, s2): (f64, f64)| {
            let mean = s / count;
            let var = if n_traj > 1 {
                ((s2 - count * mean * mean) / (count - 1.0)).max(0.0)
            } else {
                0.0
            };
            (mean, (var / count).sqrt())
        };
        let steps = total
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let (mean_fidelity, stderr_fidelity) = mean_se(t.fid);
                let (mean_increment, stderr_increment) = mean_se(t.inc);
                let (mean_trace_distance, stderr_trace_distance) = mean_se(t.td);
                StepSummary {
                    k,
                    mean_fidelity,
                    stderr_fidelity,
                    mean_increment,
                    stderr_increment,
                    mean_trace_distance,
                    stderr_trace_distance,
                    mean_frobenius: t.fro / count,
                    fallback_steps: t.fallbacks,
                }
            })
            .collect();
        Ok(Self {
            trajectories: n_traj,
            steps,
        })
    }

    /// Steps `k >= 1` where the mean fidelity drops by more than
    /// `z` standard errors of the paired increment.
    pub fn submartingale_violations(&self, z: f64) -> Vec<usize> {
        self.steps
            .iter()
            .skip(1)
            .filter(|s| s.mean_increment < -z * s.stderr_increment)
            .map(|s| s.k)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{SUMMARY_CSV_HEADER}")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.k,
                self.trajectories,
                fmt_f64(s.mean_fidelity),
                fmt_f64(s.stderr_fidelity),
                fmt_f64(s.mean_increment),
                fmt_f64(s.stderr_increment),
                fmt_f64(s.mean_trace_distance),
                fmt_f64(s.stderr_trace_distance),
                fmt_f64(s.mean_frobenius),
                s.fallback_steps,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{apply_channel, outcome_probs, random_channel, unitary_channel};
    use crate::linalg::{self, ComplexMatrix};
    use crate::reference;
    use crate::states::{maximally_mixed, random_density};

    fn random_cfg(seed: u64, steps: usize) -> SimulationConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = random_channel(3, 3, &mut rng).unwrap();
        let rho = random_density(3, 2, &mut rng).unwrap();
        let est = random_density(3, 3, &mut rng).unwrap();
        SimulationConfig::new(ch, rho, est, steps, seed)
    }

    #[test]
    fn equal_inputs_give_equal_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = random_channel(3, 4, &mut rng).unwrap();
        let rho = random_density(3, 2, &mut rng).unwrap();
        for _ in 0..50 {
            let t = step_joint(&ch, &rho, &rho, &ch.singletons(), None, &mut rng).unwrap();
            assert_eq!(t.true_state, t.estimate);
        }
    }

    #[test]
    fn unitary_step_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = channels::haar_unitary(3, &mut rng);
        let ch = unitary_channel(u.clone()).unwrap();
        let rho = random_density(3, 2, &mut rng).unwrap();
        let est = maximally_mixed(3).unwrap();
        let t = step_joint(&ch, &rho, &est, &ch.singletons(), None, &mut rng).unwrap();
        assert_eq!(t.outcome, 0);
        assert!((t.true_state.matrix() - &u * rho.matrix() * u.adjoint()).norm() < 1e-13);
        assert!((t.estimate.matrix() - est.matrix()).norm() < 1e-13);
    }

    #[test]
    fn outcome_frequencies_match_probabilities() {
        let (ch, sigma, rho) = reference::instance();
        let probs = outcome_probs(&ch, &rho, &ch.singletons()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let mut counts = [0usize; 2];
        for _ in 0..trials {
            let t = step_joint(&ch, &rho, &sigma, &ch.singletons(), None, &mut rng).unwrap();
            counts[t.outcome] += 1;
        }
        for (mu, &c) in counts.iter().enumerate() {
            let p = probs.get(mu);
            let sd = (trials as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - trials as f64 * p).abs();
            assert!(dev <= 4.0 * sd, "outcome {mu}: {c} vs {}", trials as f64 * p);
        }
    }

    #[test]
    fn zero_steps_gives_initial_record() {
        let cfg = random_cfg(4, 0);
        let t = simulate(&cfg).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.steps[0].k, 0);
        assert_eq!(t.steps[0].outcome, None);
        let csv = t.to_csv_string();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), TRAJECTORY_CSV_HEADER);
    }

    #[test]
    fn perfect_estimate_keeps_unit_fidelity() {
        let mut cfg = random_cfg(5, 30);
        cfg.initial_estimate = cfg.initial_state.clone();
        let t = simulate(&cfg).unwrap();
        for s in &t.steps {
            assert!((s.metrics().unwrap().fidelity - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_first_step_matches_channel() {
        let cfg = random_cfg(6, 1);
        let ChannelSource::Fixed(ch) = &cfg.channels else { unreachable!() };
        let expected = apply_channel(ch, &cfg.initial_state).unwrap();
        let n_traj = 100_000;
        let batch = simulate_batch(&cfg, n_traj).unwrap();
        let mut mean = ComplexMatrix::zeros(3, 3);
        for t in &batch {
            mean += t.steps[1].true_state.matrix();
        }
        mean.unscale_mut(n_traj as f64);
        let dev = linalg::max_abs(&(mean - expected.matrix()));
        assert!(dev <= 5e-3, "deviation {dev}");
    }

    #[test]
    fn batch_is_deterministic_and_matches_simulate() {
        let cfg = random_cfg(7, 8);
        let a = simulate_batch(&cfg, 16).unwrap();
        let b = simulate_batch(&cfg, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(simulate_batch(&cfg, 1).unwrap()[0], simulate(&cfg).unwrap());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| simulate_batch(&cfg, 16).unwrap());
        assert_eq!(serial, a);
        let csv: Vec<String> = a.iter().map(JointTrajectory::to_csv_string).collect();
        let csv2: Vec<String> = b.iter().map(JointTrajectory::to_csv_string).collect();
        assert_eq!(csv, csv2);
        assert!(simulate_batch(&cfg, 0).is_err());
    }

    #[test]
    fn summary_is_scheduling_independent() {
        let cfg = random_cfg(8, 5);
        let a = BatchSummary::collect(&cfg, 1000).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| BatchSummary::collect(&cfg, 1000).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 6);
        assert_eq!(a.steps[0].mean_increment, 0.0);
    }

    #[test]
    fn trivial_partition_is_deterministic_channel_action() {
        let cfg = random_cfg(9, 4);
        let ChannelSource::Fixed(ch) = cfg.channels.clone() else { unreachable!() };
        let cfg = cfg.with_partition(OutcomePartition::trivial(ch.len()));
        let a = simulate_stream(&cfg, 0).unwrap();
        let b = simulate_stream(&cfg, 1).unwrap();
        let mut rho = cfg.initial_state.clone();
        for (sa, sb) in a.steps.iter().zip(&b.steps).skip(1) {
            rho = apply_channel(&ch, &rho).unwrap();
            assert!((sa.true_state.matrix() - rho.matrix()).norm() < 1e-12);
            assert_eq!(sa.true_state, sb.true_state);
            assert_eq!(sa.estimate, sb.estimate);
        }
    }

    #[test]
    fn per_step_channels_and_length_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let list: Vec<_> = (0..3).map(|_| random_channel(2, 2, &mut rng).unwrap()).collect();
        let rho = random_density(2, 2, &mut rng).unwrap();
        let mut cfg = SimulationConfig::new(list[0].clone(), rho.clone(), maximally_mixed(2).unwrap(), 3, 1);
        cfg.channels = ChannelSource::PerStep(list.clone());
        let t = simulate(&cfg).unwrap();
        assert_eq!(t.len(), 4);
        cfg.steps = 4;
        assert!(matches!(simulate(&cfg), Err(SimulationError { partial: None, .. })));
    }

    #[test]
    fn feedback_sees_estimate_only() {
        use std::sync::Mutex;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_channel(2, 2, &mut rng).unwrap();
        let b = random_channel(2, 2, &mut rng).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let select = move |k: usize, est: &DensityMatrix| {
            log.lock().unwrap().push((k, est.clone()));
            Ok(if est.purity() > 0.75 { a.clone() } else { b.clone() })
        };
        let rho = random_density(2, 1, &mut rng).unwrap();
        let mut cfg = SimulationConfig::new(
            random_channel(2, 2, &mut rng).unwrap(),
            rho,
            maximally_mixed(2).unwrap(),
            6,
            3,
        );
        cfg.channels = ChannelSource::Feedback {
            label: "purity-switch".into(),
            select: Arc::new(select),
        };
        let t = simulate(&cfg).unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 6);
        for (k, est) in seen.iter() {
            assert_eq!(&t.steps[*k].estimate, est);
        }
    }

    #[test]
    fn failure_keeps_partial_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let good = random_channel(2, 2, &mut rng).unwrap();
        let rho = random_density(2, 2, &mut rng).unwrap();
        let mut cfg = SimulationConfig::new(good.clone(), rho, maximally_mixed(2).unwrap(), 5, 0);
        cfg.channels = ChannelSource::Feedback {
            label: "breaks".into(),
            select: Arc::new(move |k, _| {
                if k < 2 {
                    Ok(good.clone())
                } else {
                    Err(Error::InvalidArgument("selector gave up".into()))
                }
            }),
        };
        let err = simulate(&cfg).unwrap_err();
        assert_eq!(err.partial.unwrap().len(), 3);
    }

    #[test]
    fn fallback_flag_reaches_csv() {
        // the estimate is |2><2|, annihilated by M_1; the truth has weight on |0>
        let (ch, _, rho) = reference::instance();
        let est = DensityMatrix::basis(3, 2).unwrap();
        let cfg = SimulationConfig::new(ch, rho, est, 3, 0);
        let found = (0..20).any(|s| {
            let t = simulate_stream(&cfg, s).unwrap();
            t.steps.iter().any(|st| st.fallback_used)
                && t.to_csv_string().lines().any(|l| l.ends_with(",1"))
        });
        assert!(found);
    }
}
