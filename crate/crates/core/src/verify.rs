//! Exact one-step conditional expectations and the inequality checks built
//! on them.
//!
//! Every expectation is a finite sum over the blocks of a partition, weighted
//! by the true state's block probabilities:
//!
//! ```text
//! E[measure(σ', ρ')] = Σ_ν p̃_ν(ρ) · measure(𝕄̃_ν(σ), 𝕄̃_ν(ρ))
//! ```
//!
//! Blocks where the estimate has zero probability use the fallback state
//! `ξ` (default `I/n`) and are listed in the report.

use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{
    self, apply_channel, conditional_update, outcome_probs, ChannelRecord, KrausChannel,
    OutcomePartition, ZERO_PROBABILITY_TOL,
};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::linalg::{self, ComplexMatrix};
use crate::measures::{self, Direction, Measure};
use crate::reference;
use crate::report::{fmt_f64, serialize_f64};
use crate::states::{self, DensityMatrix, MatrixRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Slack allowed on a theorem-backed inequality before it fails.
    pub gap: f64,
    /// A gap of the wrong sign counts as a violation only beyond this.
    pub violation: f64,
    /// Max elementwise deviation allowed in the mean-evolution identity.
    pub mean_evolution: f64,
    /// Agreement required between computed and printed reference values.
    pub reference: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gap: 1e-9,
            violation: 1e-9,
            mean_evolution: 1e-12,
            reference: 1e-12,
        }
    }
}

/// A channel, an estimate `σ`, a true state `ρ` and a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub channel: KrausChannel,
    pub sigma: DensityMatrix,
    pub rho: DensityMatrix,
    pub partition: OutcomePartition,
}

impl Instance {
    pub fn new(channel: KrausChannel, sigma: DensityMatrix, rho: DensityMatrix) -> Self {
        let partition = channel.singletons();
        Self {
            channel,
            sigma,
            rho,
            partition,
        }
    }

    pub fn with_partition(mut self, partition: OutcomePartition) -> Self {
        self.partition = partition;
        self
    }

    pub fn reference() -> Self {
        let (ch, sigma, rho) = reference::instance();
        Self::new(ch, sigma, rho)
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            channel: ChannelRecord,
            sigma: MatrixRecord,
            rho: MatrixRecord,
            partition: &'a OutcomePartition,
        }
        fingerprint::of_json(&Canonical {
            channel: self.channel.clone().into(),
            sigma: self.sigma.clone().into(),
            rho: self.rho.clone().into(),
            partition: &self.partition,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Singletons,
    Trivial,
    /// `p` uniform in `2..=m-1`; falls back to singletons when `m < 3`.
    RandomNonTrivial,
}

impl PartitionMode {
    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Singletons => "singletons",
            PartitionMode::Trivial => "trivial",
            PartitionMode::RandomNonTrivial => "random-non-trivial",
        }
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PartitionMode::Singletons, PartitionMode::Trivial, PartitionMode::RandomNonTrivial]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown partition mode `{s}`")))
    }
}

/// Random instances: `n` and `m` drawn from the listed values, channel from
/// a Haar dilation, `σ` and `ρ` Hilbert-Schmidt states of uniform random
/// rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceSpace {
    pub n_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub partition: PartitionMode,
}

impl InstanceSpace {
    pub fn new(n_values: Vec<usize>, m_values: Vec<usize>, partition: PartitionMode) -> Result<Self> {
        if n_values.is_empty() || m_values.is_empty() || n_values.contains(&0) || m_values.contains(&0) {
            return Err(Error::InvalidArgument("dimension lists must be nonempty and positive".into()));
        }
        Ok(Self {
            n_values,
            m_values,
            partition,
        })
    }

    pub fn with_partition(&self, partition: PartitionMode) -> Self {
        Self {
            partition,
            ..self.clone()
        }
    }

    /// Instance `index` of the stream family keyed by `seed`. The channel
    /// and states are drawn before the partition, so switching the
    /// partition mode keeps them unchanged.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let n = self.n_values[rng.random_range(0..self.n_values.len())];
        let m = self.m_values[rng.random_range(0..self.m_values.len())];
        let channel = channels::random_channel(n, m, &mut rng)?;
        let sigma_rank = rng.random_range(1..=n);
        let rho_rank = rng.random_range(1..=n);
        let sigma = states::random_density(n, sigma_rank, &mut rng)?;
        let rho = states::random_density(n, rho_rank, &mut rng)?;
        let partition = match self.partition {
            PartitionMode::Singletons => OutcomePartition::singletons(m),
            PartitionMode::Trivial => OutcomePartition::trivial(m),
            PartitionMode::RandomNonTrivial if m >= 3 => {
                let p = rng.random_range(2..m);
                OutcomePartition::random(m, p, &mut rng)?
            }
            PartitionMode::RandomNonTrivial => OutcomePartition::singletons(m),
        };
        Ok(Instance {
            channel,
            sigma,
            rho,
            partition,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextExpectation {
    pub value: f64,
    /// Blocks where the estimate's probability vanished and `ξ` was used.
    pub fallback_blocks: Vec<usize>,
}

/// `Σ_ν p̃_ν(ρ) · measure(𝕄̃_ν(σ or ξ), 𝕄̃_ν(ρ))` over blocks with
/// `p̃_ν(ρ) > 1e-12`. An infinite term with positive weight makes the sum
/// infinite.
pub fn expected_next_measure(
    ch: &KrausChannel,
    sigma: &DensityMatrix,
    rho: &DensityMatrix,
    measure: Measure,
    partition: &OutcomePartition,
    fallback: Option<&DensityMatrix>,
) -> Result<NextExpectation> {
    sigma.ensure_dim(rho.dim())?;
    let probs = outcome_probs(ch, rho, partition)?;
    let mut value = 0.0;
    let mut fallback_blocks = Vec::new();
    for (nu, &p) in probs.probabilities().iter().enumerate() {
        if p <= ZERO_PROBABILITY_TOL {
            continue;
        }
        let next_rho = conditional_update(ch, nu, rho, partition, None)?;
        let next_sigma = conditional_update(ch, nu, sigma, partition, fallback)?;
        if next_sigma.used_fallback {
            fallback_blocks.push(nu);
        }
        let term = measure.eval(&next_sigma.state, &next_rho.state)?;
        value += p * term;
    }
    Ok(NextExpectation {
        value,
        fallback_blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    /// One filter step: `E[measure(σ', ρ')]` against `measure(σ, ρ)`.
    FilterStep,
    /// `F(K(σ), K(ρ))` against `F(σ, ρ)`.
    KrausMonotonicity,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::FilterStep => "filter-step",
            CheckKind::KrausMonotonicity => "kraus-monotonicity",
        }
    }
}

/// Left- and right-hand sides of one checked inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub check: CheckKind,
    pub measure: Measure,
    #[serde(serialize_with = "serialize_f64")]
    pub lhs: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub rhs: f64,
    /// `lhs - rhs`.
    #[serde(serialize_with = "serialize_f64")]
    pub gap: f64,
    pub partition: OutcomePartition,
    /// Zero-based block indices where the fallback state was substituted.
    pub fallback_blocks: Vec<usize>,
    pub fingerprint: String,
    /// The inequality expected for `measure` (sub-martingale for fidelity
    /// and Frobenius, super-martingale for the distances) fails beyond
    /// tolerance.
    pub violation: bool,
}

impl GapReport {
    pub fn passed(&self) -> bool {
        !self.violation
    }
}

pub const GAP_CSV_HEADER: &str =
    "instance,check,measure,partition,lhs,rhs,gap,violation,fallback_blocks,fingerprint";

/// Writes one row per report; `instance` is the row's position.
pub fn write_gap_csv<W: Write>(reports: &[(u64, GapReport)], mut out: W) -> io::Result<()> {
    writeln!(out, "{GAP_CSV_HEADER}")?;
    for (i, r) in reports {
        let fallbacks = r
            .fallback_blocks
            .iter()
            .map(|b| (b + 1).to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            i,
            r.check.name(),
            r.measure,
            quoted(&r.partition.label()),
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            fmt_f64(r.gap),
            u8::from(r.violation),
            fallbacks,
            r.fingerprint,
        )?;
    }
    Ok(())
}

fn quoted(field: &str) -> String {
    if field.contains(',') {
        format!("\"{field}\"")
    } else {
        field.to_string()
    }
}

fn is_violation(measure: Measure, lhs: f64, rhs: f64, tol: f64) -> bool {
    let gap = lhs - rhs;
    match measure.direction() {
        Direction::Sub => !(gap >= -tol),
        // infinite sides never count: the comparison is vacuous
        Direction::Super => lhs.is_finite() && rhs.is_finite() && gap > tol,
    }
}

/// One-step check of `measure` along the filter for `inst`.
pub fn check_filter_step(inst: &Instance, measure: Measure, tol: &Tolerances) -> Result<GapReport> {
    let next = expected_next_measure(&inst.channel, &inst.sigma, &inst.rho, measure, &inst.partition, None)?;
    let rhs = measure.eval(&inst.sigma, &inst.rho)?;
    let tol = match measure.direction() {
        Direction::Sub => tol.gap,
        Direction::Super => tol.violation,
    };
    Ok(GapReport {
        check: CheckKind::FilterStep,
        measure,
        lhs: next.value,
        rhs,
        gap: next.value - rhs,
        partition: inst.partition.clone(),
        fallback_blocks: next.fallback_blocks,
        fingerprint: inst.fingerprint(),
        violation: is_violation(measure, next.value, rhs, tol),
    })
}

/// `E[F(σ', ρ')] - F(σ, ρ)` for the filter on `partition`; passes when the
/// gap is at least `-1e-9`.
pub fn check_fidelity_submartingale(
    ch: &KrausChannel,
    sigma: &DensityMatrix,
    rho: &DensityMatrix,
    partition: &OutcomePartition,
) -> Result<GapReport> {
    let inst = Instance::new(ch.clone(), sigma.clone(), rho.clone()).with_partition(partition.clone());
    check_filter_step(&inst, Measure::Fidelity, &Tolerances::default())
}

/// `F(K(σ), K(ρ)) - F(σ, ρ)`.
pub fn check_kraus_monotonicity(
    ch: &KrausChannel,
    sigma: &DensityMatrix,
    rho: &DensityMatrix,
) -> Result<GapReport> {
    check_kraus_monotonicity_with(ch, sigma, rho, &Tolerances::default())
}

pub fn check_kraus_monotonicity_with(
    ch: &KrausChannel,
    sigma: &DensityMatrix,
    rho: &DensityMatrix,
    tol: &Tolerances,
) -> Result<GapReport> {
    let ks = apply_channel(ch, sigma)?;
    let kr = apply_channel(ch, rho)?;
    let lhs = measures::fidelity(&ks, &kr)?;
    let rhs = measures::fidelity(sigma, rho)?;
    let inst = Instance::new(ch.clone(), sigma.clone(), rho.clone());
    Ok(GapReport {
        check: CheckKind::KrausMonotonicity,
        measure: Measure::Fidelity,
        lhs,
        rhs,
        gap: lhs - rhs,
        partition: OutcomePartition::trivial(ch.len()),
        fallback_blocks: Vec::new(),
        fingerprint: inst.fingerprint(),
        violation: is_violation(Measure::Fidelity, lhs, rhs, tol.gap),
    })
}

/// `max |Σ_ν p̃_ν(ρ) 𝕄̃_ν(ρ) - K(ρ)|` over entries. The mixture is built from
/// the normalized updates, so this exercises the update path end to end.
pub fn check_mean_evolution(
    ch: &KrausChannel,
    rho: &DensityMatrix,
    partition: &OutcomePartition,
) -> Result<f64> {
    let probs = outcome_probs(ch, rho, partition)?;
    let n = rho.dim();
    let mut mixture = ComplexMatrix::zeros(n, n);
    for (nu, &p) in probs.probabilities().iter().enumerate() {
        if p <= ZERO_PROBABILITY_TOL {
            // the unnormalized block image is at most this large
            mixture += ch.block_image(partition.block(nu)?, rho.matrix());
            continue;
        }
        let up = conditional_update(ch, nu, rho, partition, None)?;
        mixture += up.state.matrix().scale(p);
    }
    let k = apply_channel(ch, rho)?;
    Ok(linalg::max_abs(&(mixture - k.matrix())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SidePair {
    #[serde(serialize_with = "serialize_f64")]
    pub lhs: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub rhs: f64,
}

/// Computed values of the three-level counter-example.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub completeness_residual: f64,
    pub outcome_probabilities: Vec<f64>,
    pub trace_distance: SidePair,
    pub fidelity: SidePair,
    pub frobenius: SidePair,
    pub relative_entropy: SidePair,
    pub relative_entropy_note: String,
}

impl CounterexampleReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("three-level counter-example (n = 3, m = 2)\n");
        s.push_str(&format!(
            "  completeness residual      {:.3e}\n",
            self.completeness_residual
        ));
        s.push_str(&format!(
            "  outcome probabilities      {} {}\n",
            fmt_f64(self.outcome_probabilities[0]),
            fmt_f64(self.outcome_probabilities[1])
        ));
        let row = |name: &str, p: &SidePair, lhs_frac: &str, rhs_frac: &str| {
            let tag = |f: &str| if f.is_empty() { String::new() } else { format!(" ({f})") };
            format!(
                "  {name:<16} E[next] = {}{}   now = {}{}\n",
                fmt_f64(p.lhs),
                tag(lhs_frac),
                fmt_f64(p.rhs),
                tag(rhs_frac)
            )
        };
        s.push_str(&row("trace distance", &self.trace_distance, "4/3", "1"));
        s.push_str(&row("fidelity", &self.fidelity, "1/3 = 1/4 + 1/12", "1/4"));
        s.push_str(&row("frobenius", &self.frobenius, "", ""));
        s.push_str(&row("relative entropy", &self.relative_entropy, "", ""));
        s.push_str(&format!("  note: {}\n", self.relative_entropy_note));
        s
    }
}

/// Recomputes the counter-example from the embedded matrices and checks
/// the printed values to `1e-12`.
pub fn counterexample_report() -> Result<CounterexampleReport> {
    let tol = Tolerances::default().reference;
    let inst = Instance::reference();
    let side = |measure: Measure| -> Result<SidePair> {
        let next = expected_next_measure(&inst.channel, &inst.sigma, &inst.rho, measure, &inst.partition, None)?;
        Ok(SidePair {
            lhs: next.value,
            rhs: measure.eval(&inst.sigma, &inst.rho)?,
        })
    };
    let trace_distance = side(Measure::TraceDistance)?;
    let fidelity = side(Measure::Fidelity)?;
    let expected = [
        ("trace distance after", trace_distance.lhs, reference::TRACE_DISTANCE_AFTER),
        ("trace distance before", trace_distance.rhs, reference::TRACE_DISTANCE_BEFORE),
        ("fidelity after", fidelity.lhs, reference::FIDELITY_AFTER),
        ("fidelity before", fidelity.rhs, reference::FIDELITY_BEFORE),
    ];
    for (quantity, computed, printed) in expected {
        if !((computed - printed).abs() <= tol) {
            return Err(Error::ReferenceDrift {
                quantity: quantity.to_string(),
                computed,
                expected: printed,
            });
        }
    }
    let relative_entropy = side(Measure::RelativeEntropy)?;
    let note = format!(
        "supports of ρ and σ are not nested, so S(ρ‖σ) = {} and the expectation after the jump is {}; \
         the comparison is vacuous on this instance",
        fmt_f64(relative_entropy.rhs),
        fmt_f64(relative_entropy.lhs)
    );
    Ok(CounterexampleReport {
        completeness_residual: inst.channel.completeness_residual(),
        outcome_probabilities: outcome_probs(&inst.channel, &inst.rho, &inst.partition)?
            .probabilities()
            .to_vec(),
        trace_distance,
        fidelity,
        frobenius: side(Measure::Frobenius)?,
        relative_entropy,
        relative_entropy_note: note,
    })
}

/// Where a violation search draws its instances from.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchSpace {
    Random(InstanceSpace),
    /// Trial 0 is the three-level counter-example itself; trial `i > 0`
    /// mixes its `σ` and `ρ` with random full-rank states by a random weight
    /// in `[0, 1/2)`, keeping the channel.
    CounterexampleFamily,
}

impl SearchSpace {
    pub fn instance(&self, seed: u64, trial: u64) -> Result<Instance> {
        match self {
            SearchSpace::Random(space) => space.sample(seed, trial),
            SearchSpace::CounterexampleFamily => {
                let base = Instance::reference();
                if trial == 0 {
                    return Ok(base);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(trial);
                let eps: f64 = 0.5 * rng.random::<f64>();
                let mut mix = |d: &DensityMatrix| -> Result<DensityMatrix> {
                    let tau = states::random_density(3, 3, &mut rng)?;
                    DensityMatrix::new(d.matrix().scale(1.0 - eps) + tau.matrix().scale(eps))
                };
                let sigma = mix(&base.sigma)?;
                let rho = mix(&base.rho)?;
                Ok(Instance::new(base.channel, sigma, rho))
            }
        }
    }
}

/// Runs `trials` one-step checks of `measure` and returns the violations in
/// trial order, each tagged with its trial index. Trials run in parallel on
/// independent streams of `seed`.
pub fn random_search_violation(
    measure: Measure,
    space: &SearchSpace,
    trials: u64,
    seed: u64,
    tol: &Tolerances,
) -> Result<Vec<(u64, GapReport)>> {
    let all = run_checks(measure, space, trials, seed, tol)?;
    Ok(all.into_iter().filter(|(_, r)| r.violation).collect())
}

/// Every trial's report, in trial order.
pub fn run_checks(
    measure: Measure,
    space: &SearchSpace,
    trials: u64,
    seed: u64,
    tol: &Tolerances,
) -> Result<Vec<(u64, GapReport)>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let inst = space.instance(seed, t)?;
            Ok((t, check_filter_step(&inst, measure, tol)?))
        })
        .collect()
}
