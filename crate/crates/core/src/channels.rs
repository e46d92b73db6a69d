//! Kraus channels, outcome partitions and the conditional state updates of
//! the associated quantum Markov chain.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ComplexMatrix};
use crate::states::{self, DensityMatrix, MatrixRecord};

/// Maximum `||Σ M^dag M - I||_F` accepted for a channel.
pub const COMPLETENESS_TOL: f64 = 1e-10;
/// Operators with Frobenius norm at or below this are treated as zero.
pub const ZERO_OPERATOR_TOL: f64 = 1e-12;
/// Block probabilities at or below this trigger the fallback update.
pub const ZERO_PROBABILITY_TOL: f64 = 1e-12;

/// A validated Kraus map `ρ ↦ Σ M_μ ρ M_μ^dag`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelRecord", into = "ChannelRecord")]
pub struct KrausChannel {
    dim: usize,
    operators: Vec<ComplexMatrix>,
}

impl KrausChannel {
    pub fn new(operators: Vec<ComplexMatrix>) -> Result<Self> {
        Self::with_tolerance(operators, COMPLETENESS_TOL)
    }

    pub fn with_tolerance(operators: Vec<ComplexMatrix>, tol: f64) -> Result<Self> {
        let first = operators.first().ok_or(Error::EmptyChannel)?;
        let dim = first.nrows();
        let mut gram = ComplexMatrix::zeros(dim, dim);
        for (index, op) in operators.iter().enumerate() {
            linalg::ensure_square(op)?;
            linalg::ensure_finite(op)?;
            if op.nrows() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: op.nrows(),
                });
            }
            if op.norm() <= ZERO_OPERATOR_TOL {
                return Err(Error::ZeroOperator { index });
            }
            gram += op.adjoint() * op;
        }
        let residual = (gram - linalg::identity(dim)).norm();
        if residual > tol {
            return Err(Error::Incomplete { residual });
        }
        Ok(Self { dim, operators })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of Kraus operators `m`.
    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[ComplexMatrix] {
        &self.operators
    }

    pub fn completeness_residual(&self) -> f64 {
        let gram = self
            .operators
            .iter()
            .fold(ComplexMatrix::zeros(self.dim, self.dim), |acc, m| acc + m.adjoint() * m);
        (gram - linalg::identity(self.dim)).norm()
    }

    /// Partial Kraus map `Σ_{μ ∈ block} M_μ ρ M_μ^dag`, unnormalized.
    pub fn block_image(&self, block: &[usize], rho: &ComplexMatrix) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.dim, self.dim);
        for &mu in block {
            let m = &self.operators[mu];
            out += m * rho * m.adjoint();
        }
        out
    }

    /// Unit-interface view: `m` singleton blocks.
    pub fn singletons(&self) -> OutcomePartition {
        OutcomePartition::singletons(self.len())
    }

    fn check_state(&self, rho: &DensityMatrix) -> Result<()> {
        rho.ensure_dim(self.dim)
    }
}

pub fn validate_channel(ops: Vec<ComplexMatrix>) -> Result<KrausChannel> {
    KrausChannel::new(ops)
}

/// `{"dim": n, "operators": [matrix, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub dim: usize,
    pub operators: Vec<MatrixRecord>,
}

impl TryFrom<ChannelRecord> for KrausChannel {
    type Error = Error;

    fn try_from(r: ChannelRecord) -> Result<Self> {
        let ops = r
            .operators
            .iter()
            .map(MatrixRecord::to_matrix)
            .collect::<Result<Vec<_>>>()?;
        let ch = KrausChannel::new(ops)?;
        if ch.dim != r.dim {
            return Err(Error::DimensionMismatch {
                expected: r.dim,
                found: ch.dim,
            });
        }
        Ok(ch)
    }
}

impl From<KrausChannel> for ChannelRecord {
    fn from(ch: KrausChannel) -> Self {
        Self {
            dim: ch.dim,
            operators: ch.operators.iter().map(MatrixRecord::from_matrix).collect(),
        }
    }
}

/// A partition of the outcome indices `0..m` into nonempty disjoint blocks.
///
/// Indices are zero-based in memory and one-based in JSON.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PartitionRecord", into = "PartitionRecord")]
pub struct OutcomePartition {
    m: usize,
    blocks: Vec<Vec<usize>>,
}

impl OutcomePartition {
    pub fn new(m: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidPartition("no outcomes".into()));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidPartition("no blocks".into()));
        }
        let mut seen = vec![false; m];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidPartition(format!("block {} is empty", b + 1)));
            }
            for &mu in block {
                if mu >= m {
                    return Err(Error::InvalidPartition(format!(
                        "index {} exceeds m = {m}",
                        mu + 1
                    )));
                }
                if std::mem::replace(&mut seen[mu], true) {
                    return Err(Error::InvalidPartition(format!(
                        "index {} appears twice",
                        mu + 1
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidPartition(format!(
                "index {} not covered",
                missing + 1
            )));
        }
        Ok(Self { m, blocks })
    }

    pub fn from_one_based(m: usize, blocks: &[Vec<usize>]) -> Result<Self> {
        let blocks = blocks
            .iter()
            .map(|b| {
                b.iter()
                    .map(|&i| {
                        i.checked_sub(1)
                            .ok_or_else(|| Error::InvalidPartition("index 0 in one-based partition".into()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(m, blocks)
    }

    pub fn singletons(m: usize) -> Self {
        Self {
            m,
            blocks: (0..m).map(|mu| vec![mu]).collect(),
        }
    }

    /// The single block `{0..m}`.
    pub fn trivial(m: usize) -> Self {
        Self {
            m,
            blocks: vec![(0..m).collect()],
        }
    }

    /// Uniformly random assignment of `m` outcomes to exactly `p` nonempty
    /// blocks (rejection on empty blocks).
    pub fn random<R: Rng + ?Sized>(m: usize, p: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || p > m {
            return Err(Error::InvalidPartition(format!("cannot split {m} outcomes into {p} blocks")));
        }
        loop {
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..p)).collect();
            let mut blocks = vec![Vec::new(); p];
            for (mu, &l) in labels.iter().enumerate() {
                blocks[l].push(mu);
            }
            if blocks.iter().all(|b| !b.is_empty()) {
                // canonical order: by smallest member
                blocks.sort_by_key(|b| b[0]);
                return Self::new(m, blocks);
            }
        }
    }

    pub fn outcomes(&self) -> usize {
        self.m
    }

    /// Number of blocks `p`.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> Result<&[usize]> {
        self.blocks
            .get(index)
            .map(Vec::as_slice)
            .ok_or(Error::OutcomeOutOfRange {
                index,
                count: self.blocks.len(),
            })
    }

    pub fn is_singletons(&self) -> bool {
        self.blocks.iter().enumerate().all(|(i, b)| b.as_slice() == [i])
    }

    /// Compact one-based rendering, e.g. `1,3|2`.
    pub fn label(&self) -> String {
        self.blocks
            .iter()
            .map(|b| {
                b.iter()
                    .map(|i| (i + 1).to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("|")
    }

    fn check_channel(&self, ch: &KrausChannel) -> Result<()> {
        if self.m == ch.len() {
            Ok(())
        } else {
            Err(Error::InvalidPartition(format!(
                "partition covers {} outcomes but the channel has {}",
                self.m,
                ch.len()
            )))
        }
    }
}

/// `{"m": m, "blocks": [[1-based indices], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub m: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl TryFrom<PartitionRecord> for OutcomePartition {
    type Error = Error;

    fn try_from(r: PartitionRecord) -> Result<Self> {
        OutcomePartition::from_one_based(r.m, &r.blocks)
    }
}

impl From<OutcomePartition> for PartitionRecord {
    fn from(p: OutcomePartition) -> Self {
        Self {
            m: p.m,
            blocks: p
                .blocks
                .iter()
                .map(|b| b.iter().map(|i| i + 1).collect())
                .collect(),
        }
    }
}

/// Probabilities of the blocks of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution {
    probabilities: Vec<f64>,
}

impl OutcomeDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probabilities[index]
    }

    /// Inverse-CDF lookup for `u ∈ [0, 1)`. Mass lost to cumulative rounding
    /// goes to the last block with positive probability.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut cum = 0.0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            cum += p;
            if u < cum && p > 0.0 {
                return i;
            }
        }
        self.probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.probabilities.len() - 1)
    }
}

/// `K(ρ) = Σ M_μ ρ M_μ^dag`.
pub fn apply_channel(ch: &KrausChannel, rho: &DensityMatrix) -> Result<DensityMatrix> {
    ch.check_state(rho)?;
    let all: Vec<usize> = (0..ch.len()).collect();
    DensityMatrix::from_unnormalized(&ch.block_image(&all, rho.matrix()))
}

/// `p̃_ν(ρ) = tr(Σ_{μ ∈ P_ν} M_μ ρ M_μ^dag)` for every block.
pub fn outcome_probs(
    ch: &KrausChannel,
    rho: &DensityMatrix,
    partition: &OutcomePartition,
) -> Result<OutcomeDistribution> {
    ch.check_state(rho)?;
    partition.check_channel(ch)?;
    let fine: Vec<f64> = ch
        .operators
        .iter()
        .map(|m| {
            // tr(M ρ M^dag) = Σ_ij (M ρ)_ij conj(M_ij)
            let mr = m * rho.matrix();
            mr.iter()
                .zip(m.iter())
                .map(|(a, b)| (a * b.conj()).re)
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let probabilities = partition
        .blocks
        .iter()
        .map(|b| b.iter().map(|&mu| fine[mu]).sum())
        .collect();
    Ok(OutcomeDistribution { probabilities })
}

/// Result of a conditional update.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub state: DensityMatrix,
    pub used_fallback: bool,
}

/// `𝕄̃_ν(ρ) = Σ_{μ ∈ P_ν} M_μ ρ M_μ^dag / p̃_ν(ρ)`.
///
/// When `p̃_ν(ρ) <= 1e-12` the update is applied to `fallback` instead
/// (`I/n` when `None`).
pub fn conditional_update(
    ch: &KrausChannel,
    index: usize,
    rho: &DensityMatrix,
    partition: &OutcomePartition,
    fallback: Option<&DensityMatrix>,
) -> Result<Update> {
    ch.check_state(rho)?;
    partition.check_channel(ch)?;
    let block = partition.block(index)?;
    let image = ch.block_image(block, rho.matrix());
    if linalg::trace_re(&image) > ZERO_PROBABILITY_TOL {
        return Ok(Update {
            state: DensityMatrix::from_unnormalized(&image)?,
            used_fallback: false,
        });
    }
    let default;
    let xi = match fallback {
        Some(xi) => {
            ch.check_state(xi)?;
            xi
        }
        None => {
            default = states::maximally_mixed(ch.dim)?;
            &default
        }
    };
    let image = ch.block_image(block, xi.matrix());
    if linalg::trace_re(&image) <= ZERO_PROBABILITY_TOL {
        return Err(Error::NoAdmissibleFallback { block: index });
    }
    Ok(Update {
        state: DensityMatrix::from_unnormalized(&image)?,
        used_fallback: true,
    })
}

/// Haar-random unitary from the QR decomposition of a complex Ginibre
/// matrix, with the phases of `R`'s diagonal moved into `Q`.
pub fn haar_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> ComplexMatrix {
    let qr = states::ginibre(d, d, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        let rjj = r[(j, j)];
        let phase = if rjj.norm() > 0.0 {
            rjj / rjj.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        for i in 0..d {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Random channel with `M_μ = <μ| U |e_0>` blocks of a Haar unitary on
/// `S ⊗ E` (system index fastest, so block `μ` is rows `μn..(μ+1)n` of the
/// first `n` columns).
pub fn random_channel<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<KrausChannel> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("channel dimensions must be positive".into()));
    }
    let u = haar_unitary(n * m, rng);
    let ops = (0..m)
        .map(|mu| u.view((mu * n, 0), (n, n)).into_owned())
        .collect();
    KrausChannel::new(ops)
}

/// Channel with the single unitary Kraus operator `u`.
pub fn unitary_channel(u: ComplexMatrix) -> Result<KrausChannel> {
    KrausChannel::new(vec![u])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::reference;

    fn diag(d: &[f64]) -> ComplexMatrix {
        linalg::from_real_diagonal(d)
    }

    #[test]
    fn reference_channel_is_complete() {
        let ch = reference::channel();
        let gram = ch
            .operators()
            .iter()
            .fold(ComplexMatrix::zeros(3, 3), |acc, m| acc + m.adjoint() * m);
        assert!((gram - linalg::identity(3)).norm() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        let half = linalg::identity(2).unscale(2.0);
        assert!(matches!(KrausChannel::new(vec![half]), Err(Error::Incomplete { .. })));
        assert!(matches!(KrausChannel::new(vec![]), Err(Error::EmptyChannel)));
        let ops = vec![linalg::identity(2), ComplexMatrix::zeros(2, 2)];
        assert!(matches!(KrausChannel::new(ops), Err(Error::ZeroOperator { index: 1 })));
        let ops = vec![linalg::identity(2), linalg::identity(3)];
        assert!(matches!(KrausChannel::new(ops), Err(Error::DimensionMismatch { .. })));
        let u = haar_unitary(3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(unitary_channel(u).is_ok());
    }

    #[test]
    fn reference_channel_fixes_rho() {
        let (ch, _, rho) = reference::instance();
        let out = apply_channel(&ch, &rho).unwrap();
        assert!((out.matrix() - rho.matrix()).norm() < 1e-15);
        let p = outcome_probs(&ch, &rho, &ch.singletons()).unwrap();
        assert!((p.get(0) - 0.75).abs() < 1e-15 && (p.get(1) - 0.25).abs() < 1e-15);
        let up = conditional_update(&ch, 0, &rho, &ch.singletons(), None).unwrap();
        assert!(!up.used_fallback);
        assert!((up.state.matrix() - diag(&[2.0 / 3.0, 1.0 / 3.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn unitary_channel_acts_by_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = haar_unitary(3, &mut rng);
        let ch = unitary_channel(u.clone()).unwrap();
        let rho = states::random_density(3, 2, &mut rng).unwrap();
        let expected = &u * rho.matrix() * u.adjoint();
        assert!((apply_channel(&ch, &rho).unwrap().matrix() - &expected).norm() < 1e-13);
        let p = outcome_probs(&ch, &rho, &ch.singletons()).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p.get(0) - 1.0).abs() < 1e-13);
        let up = conditional_update(&ch, 0, &rho, &ch.singletons(), None).unwrap();
        assert!((up.state.matrix() - &expected).norm() < 1e-13);
    }

    #[test]
    fn trivial_partition_has_unit_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ch = random_channel(3, 4, &mut rng).unwrap();
        let rho = states::random_density(3, 3, &mut rng).unwrap();
        let p = outcome_probs(&ch, &rho, &OutcomePartition::trivial(4)).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p.get(0) - 1.0).abs() < 1e-12);
        let up = conditional_update(&ch, 0, &rho, &OutcomePartition::trivial(4), None).unwrap();
        let k = apply_channel(&ch, &rho).unwrap();
        assert!((up.state.matrix() - k.matrix()).norm() < 1e-13);
    }

    #[test]
    fn fallback_fires_on_zero_probability_block() {
        let (ch, sigma, _) = reference::instance();
        // M_1 annihilates |2><2|
        let pure2 = DensityMatrix::basis(3, 2).unwrap();
        let up = conditional_update(&ch, 0, &pure2, &ch.singletons(), None).unwrap();
        assert!(up.used_fallback);
        let expected = ch.block_image(&[0], &linalg::identity(3));
        let expected = expected.unscale(linalg::trace_re(&expected));
        assert!((up.state.matrix() - expected).norm() < 1e-15);
        // an explicit fallback with zero weight on that block is rejected
        let err = conditional_update(&ch, 0, &pure2, &ch.singletons(), Some(&pure2));
        assert!(matches!(err, Err(Error::NoAdmissibleFallback { block: 0 })));
        let _ = sigma;
    }

    #[test]
    fn partition_validation_and_json() {
        assert!(OutcomePartition::new(3, vec![vec![0, 1], vec![2]]).is_ok());
        assert!(OutcomePartition::new(3, vec![vec![0, 1]]).is_err());
        assert!(OutcomePartition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(OutcomePartition::new(3, vec![vec![0, 1, 2], vec![]]).is_err());
        assert!(OutcomePartition::new(2, vec![vec![0, 3]]).is_err());
        let p: OutcomePartition = serde_json::from_str(r#"{"m":3,"blocks":[[1,3],[2]]}"#).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 2], vec![1]]);
        assert_eq!(p.label(), "1,3|2");
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"m":3,"blocks":[[1,3],[2]]}"#);
        assert!(serde_json::from_str::<OutcomePartition>(r#"{"m":2,"blocks":[[0,1]]}"#).is_err());
    }

    #[test]
    fn random_partitions_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for m in 1..7 {
            for p in 1..=m {
                let part = OutcomePartition::random(m, p, &mut rng).unwrap();
                assert_eq!(part.len(), p);
                assert_eq!(part.outcomes(), m);
            }
        }
    }

    #[test]
    fn random_channels_are_complete_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..=5 {
            for m in 1..=5 {
                let ch = random_channel(n, m, &mut rng).unwrap();
                assert!(ch.completeness_residual() <= 1e-10);
            }
        }
        let a = random_channel(3, 2, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = random_channel(3, 2, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
        let u = random_channel(4, 1, &mut rng).unwrap();
        let op = &u.operators()[0];
        assert!((op.adjoint() * op - linalg::identity(4)).norm() < 1e-12);
    }

    #[test]
    fn channel_json_round_trip() {
        let ch = reference::channel();
        let s = serde_json::to_string(&ch).unwrap();
        let back: KrausChannel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ch);
        let bad = r#"{"dim":2,"operators":[{"dim":2,"re":[[0.5,0],[0,0.5]]}]}"#;
        assert!(serde_json::from_str::<KrausChannel>(bad).is_err());
    }

    #[test]
    fn inverse_cdf_sampling() {
        let d = OutcomeDistribution {
            probabilities: vec![0.25, 0.0, 0.75],
        };
        assert_eq!(d.sample_index(0.0), 0);
        assert_eq!(d.sample_index(0.2499), 0);
        assert_eq!(d.sample_index(0.25), 2);
        assert_eq!(d.sample_index(0.999_999_999), 2);
        let short = OutcomeDistribution {
            probabilities: vec![0.5, 0.5 - 1e-15, 0.0],
        };
        assert_eq!(short.sample_index(1.0 - 1e-17), 1);
    }
}
