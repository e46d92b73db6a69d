//! Environment model of a channel and a numerical replay of the
//! purification argument behind the fidelity sub-martingale.
//!
//! Vectors on `S ⊗ E` are indexed `s + n·e`; on `S ⊗ Q ⊗ E` they are indexed
//! `s + n·q + n²·e`. The system index is always fastest.

use num_complex::Complex64;
use serde::Serialize;

use crate::channels::{conditional_update, outcome_probs, KrausChannel, OutcomePartition, ZERO_PROBABILITY_TOL};
use crate::error::{Error, Result};
use crate::linalg::{self, ComplexMatrix, ComplexVector};
use crate::measures;
use crate::states::{self, DensityMatrix, StateVector};

pub const LINK_TOL: f64 = 1e-9;

/// Unitary `U` on `S ⊗ E` with `U(|φ⟩⊗|e₀⟩) = Σ_μ (M_μ|φ⟩)⊗|μ⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dilation {
    n: usize,
    m: usize,
    unitary: ComplexMatrix,
    e0: StateVector,
    projectors: Vec<ComplexMatrix>,
}

/// Builds the dilation with `|e₀⟩` the first environment basis vector. The
/// stacked isometry `V[s' + n·μ, s] = M_μ[s', s]` fills the first `n`
/// columns of `U` unchanged.
pub fn stinespring(ch: &KrausChannel) -> Result<Dilation> {
    let n = ch.dim();
    let m = ch.len();
    let mut v = ComplexMatrix::zeros(n * m, n);
    for (mu, op) in ch.operators().iter().enumerate() {
        v.view_mut((mu * n, 0), (n, n)).copy_from(op);
    }
    let unitary = linalg::complete_isometry(&v)?;
    let projectors = (0..m)
        .map(|mu| {
            let mut p = ComplexMatrix::zeros(n * m, n * m);
            for s in 0..n {
                p[(s + n * mu, s + n * mu)] = Complex64::new(1.0, 0.0);
            }
            p
        })
        .collect();
    Ok(Dilation {
        n,
        m,
        unitary,
        e0: StateVector::basis(m, 0)?,
        projectors,
    })
}

impl Dilation {
    pub fn system_dim(&self) -> usize {
        self.n
    }

    pub fn environment_dim(&self) -> usize {
        self.m
    }

    pub fn unitary(&self) -> &ComplexMatrix {
        &self.unitary
    }

    pub fn e0(&self) -> &StateVector {
        &self.e0
    }

    /// `P_μ` on `S ⊗ E`, projecting onto `S ⊗ span|μ⟩`.
    pub fn projectors(&self) -> &[ComplexMatrix] {
        &self.projectors
    }

    pub fn unitarity_deviation(&self) -> f64 {
        let d = self.n * self.m;
        let id = linalg::identity(d);
        let a = (self.unitary.adjoint() * &self.unitary - &id).norm();
        let b = (&self.unitary * self.unitary.adjoint() - id).norm();
        a.max(b)
    }

    /// `(I ⊗ ⟨μ|) U (I ⊗ |e₀⟩)` for every `μ`.
    pub fn recovered_operators(&self) -> Vec<ComplexMatrix> {
        (0..self.m)
            .map(|mu| self.unitary.view((mu * self.n, 0), (self.n, self.n)).into_owned())
            .collect()
    }

    /// Largest Frobenius deviation between recovered and source operators.
    pub fn roundtrip_error(&self, ch: &KrausChannel) -> Result<f64> {
        if ch.dim() != self.n || ch.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.n * self.m,
                found: ch.dim() * ch.len(),
            });
        }
        Ok(self
            .recovered_operators()
            .iter()
            .zip(ch.operators())
            .map(|(r, m)| (r - m).norm())
            .fold(0.0, f64::max))
    }

    /// `tr_E(P_μ U (ρ ⊗ |e₀⟩⟨e₀|) U† P_μ)`, which equals `M_μ ρ M_μ†`.
    pub fn branch(&self, mu: usize, rho: &DensityMatrix) -> Result<ComplexMatrix> {
        rho.ensure_dim(self.n)?;
        if mu >= self.m {
            return Err(Error::OutcomeOutOfRange { index: mu, count: self.m });
        }
        let e0e0 = self.e0.projector();
        // E is the slower factor, so the Kronecker order is E ⊗ S
        let joint = linalg::kron(&e0e0, rho.matrix());
        let p = &self.projectors[mu];
        let out = p * &self.unitary * joint * self.unitary.adjoint() * p;
        states::partial_trace(&out, self.m, self.n, states::Keep::B)
    }

    /// `|x⟩ ⊗ |e₀⟩` for `x` on `S ⊗ Q`.
    pub fn attach_environment(&self, x: &StateVector) -> Result<ComplexVector> {
        let len = x.dim();
        if len % self.n != 0 {
            return Err(Error::DimensionMismatch { expected: self.n, found: len });
        }
        let mut out = ComplexVector::zeros(len * self.m);
        out.rows_mut(0, len).copy_from(x.amplitudes());
        Ok(out)
    }

    /// `(U ⊗ I_Q)` on `S ⊗ Q ⊗ E`, where `Q` has dimension `len / (n·m)`.
    pub fn apply(&self, x: &ComplexVector) -> Result<ComplexVector> {
        let block = self.n * self.m;
        if x.len() % block != 0 {
            return Err(Error::DimensionMismatch { expected: block, found: x.len() });
        }
        let (n, q_dim) = (self.n, x.len() / block);
        let stride_e = n * q_dim;
        let mut out = ComplexVector::zeros(x.len());
        let mut local = ComplexVector::zeros(block);
        for q in 0..q_dim {
            for e in 0..self.m {
                for s in 0..n {
                    local[s + n * e] = x[s + n * q + stride_e * e];
                }
            }
            let y = &self.unitary * &local;
            for e in 0..self.m {
                for s in 0..n {
                    out[s + n * q + stride_e * e] = y[s + n * e];
                }
            }
        }
        Ok(out)
    }

    /// `(Σ_{μ∈block} P_μ) ⊗ I_Q` on `S ⊗ Q ⊗ E`.
    pub fn project(&self, block: &[usize], x: &ComplexVector) -> ComplexVector {
        let stride_e = x.len() / self.m;
        let mut out = ComplexVector::zeros(x.len());
        for &mu in block {
            out.rows_mut(mu * stride_e, stride_e)
                .copy_from(&x.rows(mu * stride_e, stride_e));
        }
        out
    }
}

/// Purifications `(ψ̂, ψ)` of `(σ, ρ)` on `S ⊗ Q` with `|⟨ψ̂|ψ⟩|² = F(σ, ρ)`.
///
/// `ψ` is the Schmidt purification of `ρ`, whose reshape `Ψ` satisfies
/// `ΨΨ† = ρ`. With `√σ Ψ = X Σ Y†`, the estimate's reshape is `√σ X Y†`, so
/// the overlap equals `tr Σ`. The unitary `X Y†` is the polar factor of
/// `√σ Ψ`.
pub fn uhlmann_pair(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<(StateVector, StateVector)> {
    let n = rho.dim();
    sigma.ensure_dim(n)?;
    let psi = states::purify(rho);
    let big_psi = ComplexMatrix::from_column_slice(n, n, psi.amplitudes().as_slice());
    let root = linalg::psd_sqrt(sigma.matrix())?;
    let w = linalg::polar_unitary(&(&root * &big_psi))?;
    let hat = root * w;
    let psi_hat = StateVector::normalized(ComplexVector::from_column_slice(hat.as_slice()))?;
    Ok((psi_hat, psi))
}

/// One block of the partition in the replay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReplay {
    pub block: usize,
    /// `p̃_ν(ρ)`.
    pub probability: f64,
    /// `p̃_ν(σ)`.
    pub probability_estimate: f64,
    /// `‖P̃_ν|χ⟩‖²`.
    pub projected_norm: f64,
    /// `|⟨χ̂_ν|χ_ν⟩|²`, zero when the estimate's branch vanishes.
    pub overlap: f64,
    /// `F(𝕄̃_ν(σ or ξ), 𝕄̃_ν(ρ))`.
    pub fidelity: f64,
    /// Max elementwise gap between the reduced normalized branch and the
    /// conditional update, worst of the two states.
    pub purification_error: f64,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkCheck {
    pub link: char,
    pub statement: &'static str,
    /// Smallest `lhs - rhs` for an inequality, `-|deviation|` for an
    /// identity; the link holds when this is at least `-tolerance`.
    pub slack: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProofReplayReport {
    pub partition: OutcomePartition,
    /// `F(σ, ρ)`.
    pub fidelity: f64,
    /// `|⟨ψ̂|ψ⟩|²` before the environment is attached.
    pub overlap_purifications: f64,
    /// `|⟨χ̂|χ⟩|²`.
    pub overlap_initial: f64,
    pub blocks: Vec<BlockReplay>,
    /// `Σ_ν p̃_ν(ρ) |⟨χ̂_ν|χ_ν⟩|²`.
    pub cauchy_schwarz_lhs: f64,
    /// `|⟨χ̂|χ⟩|²`.
    pub cauchy_schwarz_rhs: f64,
    /// `Σ_ν p̃_ν(ρ) F(𝕄̃_ν(σ), 𝕄̃_ν(ρ))`, the expected fidelity after one step.
    pub expected_fidelity: f64,
    pub links: Vec<LinkCheck>,
    pub all_links_hold: bool,
    pub tolerance: f64,
}

impl ProofReplayReport {
    /// Gap implied by chaining the links: `E[F'] - F`.
    pub fn chained_gap(&self) -> f64 {
        self.expected_fidelity - self.fidelity
    }

    pub fn min_slack(&self) -> f64 {
        self.links.iter().map(|l| l.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "proof replay on partition {}  (tolerance {:.1e})\n",
            self.partition.label(),
            self.tolerance
        );
        s.push_str("  block  p(rho)                  p(sigma)                overlap                 fidelity                fallback\n");
        for b in &self.blocks {
            s.push_str(&format!(
                "  {:<5}  {:<22.16e}  {:<22.16e}  {:<22.16e}  {:<22.16e}  {}\n",
                b.block + 1,
                b.probability,
                b.probability_estimate,
                b.overlap,
                b.fidelity,
                if b.fallback_used { "yes" } else { "no" }
            ));
        }
        s.push_str("  link  slack                    holds  statement\n");
        for l in &self.links {
            s.push_str(&format!(
                "  ({})   {:<23.16e}  {:<5}  {}\n",
                l.link,
                l.slack,
                if l.holds { "yes" } else { "NO" },
                l.statement
            ));
        }
        s.push_str(&format!(
            "  F(sigma, rho) = {:.16e}   E[F next] = {:.16e}   gap = {:.16e}\n",
            self.fidelity,
            self.expected_fidelity,
            self.chained_gap()
        ));
        s.push_str(&format!("  all links hold: {}\n", self.all_links_hold));
        s
    }
}

pub fn replay_proof(
    ch: &KrausChannel,
    sigma: &DensityMatrix,
    rho: &DensityMatrix,
    partition: &OutcomePartition,
) -> Result<ProofReplayReport> {
    replay_proof_with(ch, sigma, rho, partition, None, LINK_TOL)
}

/// Replays the argument: attach `|e₀⟩` to an Uhlmann pair, apply `U ⊗ I_Q`,
/// split by the block projectors, and check each link within `tol`.
pub fn replay_proof_with(
    ch: &KrausChannel,
    sigma: &DensityMatrix,
    rho: &DensityMatrix,
    partition: &OutcomePartition,
    fallback: Option<&DensityMatrix>,
    tol: f64,
) -> Result<ProofReplayReport> {
    let n = ch.dim();
    rho.ensure_dim(n)?;
    sigma.ensure_dim(n)?;
    let dil = stinespring(ch)?;
    let (psi_hat, psi) = uhlmann_pair(sigma, rho)?;
    let chi = dil.apply(&dil.attach_environment(&psi)?)?;
    let chi_hat = dil.apply(&dil.attach_environment(&psi_hat)?)?;

    let fidelity = measures::fidelity(sigma, rho)?;
    let overlap_purifications = psi_hat.inner(&psi).norm_sqr();
    let overlap_initial = chi_hat.dotc(&chi).norm_sqr();

    let p_rho = outcome_probs(ch, rho, partition)?;
    let p_sigma = outcome_probs(ch, sigma, partition)?;
    let mut blocks = Vec::new();
    for nu in 0..partition.len() {
        let probability = p_rho.get(nu);
        if probability <= ZERO_PROBABILITY_TOL {
            continue;
        }
        let members = partition.block(nu)?;
        let branch = dil.project(members, &chi);
        let projected_norm = branch.norm_squared();
        let branch_hat = dil.project(members, &chi_hat);

        let target = conditional_update(ch, nu, rho, partition, None)?;
        let target_hat = conditional_update(ch, nu, sigma, partition, fallback)?;
        let unit = branch.unscale(projected_norm.sqrt());
        let mut purification_error = linalg::max_abs(&(states::reduce_fastest(&unit, n)? - target.state.matrix()));

        let overlap = if target_hat.used_fallback {
            0.0
        } else {
            let unit_hat = branch_hat.unscale(branch_hat.norm());
            let err = linalg::max_abs(&(states::reduce_fastest(&unit_hat, n)? - target_hat.state.matrix()));
            purification_error = purification_error.max(err);
            unit_hat.dotc(&unit).norm_sqr()
        };
        blocks.push(BlockReplay {
            block: nu,
            probability,
            probability_estimate: p_sigma.get(nu),
            projected_norm,
            overlap,
            fidelity: measures::fidelity(&target_hat.state, &target.state)?,
            purification_error,
            fallback_used: target_hat.used_fallback,
        });
    }

    let cauchy_schwarz_lhs: f64 = blocks.iter().map(|b| b.probability * b.overlap).sum();
    let expected_fidelity: f64 = blocks.iter().map(|b| b.probability * b.fidelity).sum();
    let worst = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0_f64, f64::min);
    let slacks = [
        (
            'a',
            "squared norm of each projected branch equals the block probability",
            worst(&mut blocks.iter().map(|b| -(b.projected_norm - b.probability).abs())),
        ),
        (
            'b',
            "normalized branches purify the conditional updates",
            worst(&mut blocks.iter().map(|b| -b.purification_error)),
        ),
        (
            'c',
            "block fidelity dominates the block overlap",
            worst(&mut blocks.iter().map(|b| b.fidelity - b.overlap)),
        ),
        (
            'd',
            "weighted block overlaps dominate the initial overlap",
            (cauchy_schwarz_lhs - overlap_initial).min(0.0),
        ),
        (
            'e',
            "initial overlap equals the fidelity",
            -(overlap_initial - fidelity).abs(),
        ),
    ];
    let links: Vec<LinkCheck> = slacks
        .into_iter()
        .map(|(link, statement, slack)| LinkCheck {
            link,
            statement,
            slack,
            holds: slack >= -tol,
        })
        .collect();
    let all_links_hold = links.iter().all(|l| l.holds);
    Ok(ProofReplayReport {
        partition: partition.clone(),
        fidelity,
        overlap_purifications,
        overlap_initial,
        blocks,
        cauchy_schwarz_lhs,
        cauchy_schwarz_rhs: overlap_initial,
        expected_fidelity,
        links,
        all_links_hold,
        tolerance: tol,
    })
}
