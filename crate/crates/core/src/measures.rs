//! Comparison functionals between density matrices.
//!
//! Fidelity uses the squared convention `F(σ, ρ) = (tr sqrt(sqrt(σ) ρ sqrt(σ)))²`
//! and the trace distance is `tr|σ - ρ|` without the factor one half.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::states::DensityMatrix;

/// Eigenvalues of `σ` at or below this are outside its support.
pub const SUPPORT_TOL: f64 = 1e-10;
/// Largest overshoot of the fidelity above one tolerated before clamping.
pub const FIDELITY_OVERSHOOT: f64 = 1e-9;

fn same_dim(a: &DensityMatrix, b: &DensityMatrix) -> Result<()> {
    b.ensure_dim(a.dim())
}

/// Computed as `(tr|A^dag B|)²` from thin spectral factors `σ = A A^dag`,
/// `ρ = B B^dag`. Going through singular values keeps round-off linear,
/// where square roots of a near-singular `sqrt(σ) ρ sqrt(σ)` would amplify it.
pub fn fidelity(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    same_dim(sigma, rho)?;
    let a = linalg::psd_factor(sigma.matrix())?;
    let b = linalg::psd_factor(rho.matrix())?;
    let root_sum = linalg::trace_norm(&(a.adjoint() * b));
    let f = root_sum * root_sum;
    debug_assert!(f <= 1.0 + FIDELITY_OVERSHOOT, "fidelity overshoot {f}");
    Ok(f.clamp(0.0, 1.0))
}

/// `(tr|sqrt(σ) sqrt(ρ)|)²` through singular values; an independent route to
/// [`fidelity`].
pub fn fidelity_via_singular_values(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    same_dim(sigma, rho)?;
    let product = linalg::psd_sqrt(sigma.matrix())? * linalg::psd_sqrt(rho.matrix())?;
    let s = linalg::trace_norm(&product);
    Ok((s * s).clamp(0.0, 1.0))
}

/// `tr|σ - ρ|`, in `[0, 2]`.
pub fn trace_distance(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    same_dim(sigma, rho)?;
    linalg::trace_abs(&(sigma.matrix() - rho.matrix()))
}

/// `tr|σ - ρ| / 2`, in `[0, 1]`.
pub fn trace_distance_normalized(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    Ok(trace_distance(sigma, rho)? / 2.0)
}

/// `tr(σ ρ)`.
pub fn frobenius_inner(sigma: &DensityMatrix, rho: &DensityMatrix) -> Result<f64> {
    same_dim(sigma, rho)?;
    let v: f64 = sigma
        .matrix()
        .iter()
        .zip(rho.matrix().iter())
        .map(|(a, b)| (a.conj() * b).re)
        .sum();
    Ok(v.max(0.0))
}

/// `S(ρ‖σ) = tr(ρ ln ρ) - tr(ρ ln σ)`, `+∞` when the support of `ρ` is not
/// contained in that of `σ`.
pub fn relative_entropy(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    same_dim(rho, sigma)?;
    let er = linalg::psd_spectrum(rho.matrix())?;
    let es = linalg::psd_spectrum(sigma.matrix())?;
    let n = rho.dim();

    let neg_entropy: f64 = er
        .eigenvalues
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| l * l.ln())
        .sum();

    // weight of ρ on the eigenvectors of σ: <w_j| ρ |w_j>
    let rotated = es.eigenvectors.adjoint() * rho.matrix() * &es.eigenvectors;
    let mut cross = 0.0;
    for j in 0..n {
        let weight = rotated[(j, j)].re;
        let tau = es.eigenvalues[j];
        if tau <= SUPPORT_TOL {
            if weight > SUPPORT_TOL {
                return Ok(f64::INFINITY);
            }
        } else {
            cross += weight * tau.ln();
        }
    }
    Ok((neg_entropy - cross).max(0.0))
}

/// The comparison functionals, applied as `measure(estimate, truth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Fidelity,
    TraceDistance,
    Frobenius,
    RelativeEntropy,
}

/// Which way a measure is expected to move along the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Conditional expectation at the next step is at least the current value.
    Sub,
    /// Conditional expectation at the next step is at most the current value.
    Super,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Fidelity,
        Measure::TraceDistance,
        Measure::Frobenius,
        Measure::RelativeEntropy,
    ];

    /// Evaluates the measure between the estimate and the true state. The
    /// relative entropy is taken as `S(truth ‖ estimate)`.
    pub fn eval(self, estimate: &DensityMatrix, truth: &DensityMatrix) -> Result<f64> {
        match self {
            Measure::Fidelity => fidelity(estimate, truth),
            Measure::TraceDistance => trace_distance(estimate, truth),
            Measure::Frobenius => frobenius_inner(estimate, truth),
            Measure::RelativeEntropy => relative_entropy(truth, estimate),
        }
    }

    /// Similarities are sub-martingales; the distances are tested against
    /// the super-martingale property.
    pub fn direction(self) -> Direction {
        match self {
            Measure::Fidelity | Measure::Frobenius => Direction::Sub,
            Measure::TraceDistance | Measure::RelativeEntropy => Direction::Super,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::Fidelity => "fidelity",
            Measure::TraceDistance => "trace-distance",
            Measure::Frobenius => "frobenius",
            Measure::RelativeEntropy => "relative-entropy",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('-', "_") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown measure `{s}`")))
    }
}
