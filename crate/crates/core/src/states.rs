//! Density matrices, pure states, purification and partial traces.
//!
//! Composite vectors built here use the layout `S ⊗ Q` with the system index
//! fastest: amplitude `(s, q)` lives at flat index `s + n * q`. This is the
//! column-major vectorization of an `n x n` matrix, so a purification
//! `vec(A)` reduces to `A A^dag` on the system.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ComplexMatrix, ComplexVector};

/// Maximum deviation of `tr(ρ)` from one.
pub const TRACE_TOL: f64 = 1e-10;
/// Maximum deviation of a state vector's squared norm from one.
pub const NORM_TOL: f64 = 1e-12;

/// A Hermitian, positive semidefinite, unit-trace matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRecord", into = "MatrixRecord")]
pub struct DensityMatrix {
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    /// Validates `m` as a density matrix. The stored matrix is the Hermitian
    /// part of the input.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        linalg::ensure_square(&m)?;
        linalg::ensure_finite(&m)?;
        if m.nrows() == 0 {
            return Err(Error::InvalidArgument("density matrix of dimension 0".into()));
        }
        let asymmetry = linalg::max_asymmetry(&m);
        if asymmetry > linalg::HERMITIAN_TOL {
            return Err(Error::NotHermitian { asymmetry });
        }
        let trace = linalg::trace_re(&m);
        if (trace - 1.0).abs() > TRACE_TOL {
            return Err(Error::BadTrace { trace });
        }
        let matrix = linalg::hermitian_part(&m);
        let min_eigenvalue = linalg::hermitian_eig(&matrix)?.min_eigenvalue();
        if min_eigenvalue < -linalg::PSD_TOL {
            return Err(Error::NotPositive { min_eigenvalue });
        }
        Ok(Self { matrix })
    }

    /// Normalizes a nonzero PSD matrix by its trace and validates the result.
    pub fn from_unnormalized(m: &ComplexMatrix) -> Result<Self> {
        let trace = linalg::trace_re(m);
        if !(trace > 0.0) {
            return Err(Error::BadTrace { trace });
        }
        Self::new(linalg::hermitian_part(m).unscale(trace))
    }

    /// The pure state `|v><v|` for a normalized vector.
    pub fn pure(v: &StateVector) -> Self {
        let a = v.amplitudes();
        Self {
            matrix: linalg::hermitian_part(&(a * a.adjoint())),
        }
    }

    /// Basis projector `|k><k|` in dimension `n`.
    pub fn basis(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::OutcomeOutOfRange { index: k, count: n });
        }
        let mut diag = vec![0.0; n];
        diag[k] = 1.0;
        Self::new(linalg::from_real_diagonal(&diag))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    /// `tr(ρ²)`.
    pub fn purity(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn ensure_dim(&self, n: usize) -> Result<()> {
        if self.dim() == n {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: n,
                found: self.dim(),
            })
        }
    }
}

/// Validating constructor matching [`DensityMatrix::new`].
pub fn make_density(m: ComplexMatrix) -> Result<DensityMatrix> {
    DensityMatrix::new(m)
}

/// `I / n`.
pub fn maximally_mixed(n: usize) -> Result<DensityMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    Ok(DensityMatrix {
        matrix: linalg::identity(n).unscale(n as f64),
    })
}

pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// `rows x cols` matrix of independent standard complex Gaussians.
pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng))
}

/// Hilbert-Schmidt sample `G G^dag / tr(G G^dag)` with `G` an `n x rank`
/// Ginibre matrix.
pub fn random_density<R: Rng + ?Sized>(n: usize, rank: usize, rng: &mut R) -> Result<DensityMatrix> {
    if n == 0 || rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} out of range 1..={n}"
        )));
    }
    let g = ginibre(n, rank, rng);
    DensityMatrix::from_unnormalized(&(&g * g.adjoint()))
}

/// A unit-norm complex vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: ComplexVector,
}

impl StateVector {
    pub fn new(amplitudes: ComplexVector) -> Result<Self> {
        let norm_sqr = amplitudes.norm_squared();
        if amplitudes.is_empty() || (norm_sqr - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidArgument(format!(
                "state vector has squared norm {norm_sqr:.17}"
            )));
        }
        Ok(Self { amplitudes })
    }

    /// Divides by the norm. Fails on the zero vector.
    pub fn normalized(v: ComplexVector) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument("cannot normalize zero vector".into()));
        }
        Ok(Self {
            amplitudes: v.unscale(norm),
        })
    }

    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::OutcomeOutOfRange { index: k, count: dim });
        }
        let mut v = ComplexVector::zeros(dim);
        v[k] = Complex64::new(1.0, 0.0);
        Ok(Self { amplitudes: v })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &ComplexVector {
        &self.amplitudes
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    pub fn projector(&self) -> ComplexMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }

    /// Reduced matrix on the fastest factor of dimension `n` (trace over all
    /// slower factors).
    pub fn reduce_fastest(&self, n: usize) -> Result<ComplexMatrix> {
        reduce_fastest(&self.amplitudes, n)
    }
}

/// Reduced matrix `X X^dag` where `X` is the `n x (len / n)` column-major
/// reshape of `v`. Works for unnormalized vectors.
pub fn reduce_fastest(v: &ComplexVector, n: usize) -> Result<ComplexMatrix> {
    if n == 0 || v.len() % n != 0 {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: v.len(),
        });
    }
    let x = ComplexMatrix::from_column_slice(n, v.len() / n, v.as_slice());
    Ok(&x * x.adjoint())
}

/// Schmidt-form purification `Σ_i sqrt(λ_i) |u_i> ⊗ |i>` on `S ⊗ Q`, with
/// eigenvalues in ascending order and the system index fastest. Round-off
/// eigenvalues below the rank floor get zero amplitude.
pub fn purify(rho: &DensityMatrix) -> StateVector {
    let n = rho.dim();
    let spec = linalg::psd_spectrum(rho.matrix()).expect("validated density matrix");
    let floor = linalg::rank_floor(&spec);
    let mut amps = ComplexVector::zeros(n * n);
    for (i, &lambda) in spec.eigenvalues.iter().enumerate() {
        let w = if lambda > floor { lambda.sqrt() } else { 0.0 };
        for s in 0..n {
            amps[s + n * i] = spec.eigenvectors[(s, i)] * w;
        }
    }
    StateVector::normalized(amps).expect("unit-trace state has a nonzero purification")
}

/// Which factor of `A ⊗ B` survives a partial trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    A,
    B,
}

/// Partial trace of an operator on `A ⊗ B` in the Kronecker convention
/// (`A` index slowest: row `a * dim_b + b`).
pub fn partial_trace(m: &ComplexMatrix, dim_a: usize, dim_b: usize, keep: Keep) -> Result<ComplexMatrix> {
    let size = dim_a * dim_b;
    if m.nrows() != size || m.ncols() != size {
        return Err(Error::DimensionMismatch {
            expected: size,
            found: m.nrows().max(m.ncols()),
        });
    }
    let out = match keep {
        Keep::A => ComplexMatrix::from_fn(dim_a, dim_a, |i, j| {
            (0..dim_b).map(|b| m[(i * dim_b + b, j * dim_b + b)]).sum()
        }),
        Keep::B => ComplexMatrix::from_fn(dim_b, dim_b, |i, j| {
            (0..dim_a).map(|a| m[(a * dim_b + i, a * dim_b + j)]).sum()
        }),
    };
    Ok(out)
}

/// JSON encoding of a square complex matrix: `{"dim", "re", "im"}`, rows
/// outermost. A missing `im` means a real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im: Option<Vec<Vec<f64>>>,
}

impl MatrixRecord {
    pub fn from_matrix(m: &ComplexMatrix) -> Self {
        let rows = |f: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect())
                .collect()
        };
        Self {
            dim: m.nrows(),
            re: rows(|z| z.re),
            im: Some(rows(|z| z.im)),
        }
    }

    pub fn to_matrix(&self) -> Result<ComplexMatrix> {
        let m = linalg::from_rows(&self.re, self.im.as_deref())?;
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: m.nrows(),
            });
        }
        Ok(m)
    }
}

impl TryFrom<MatrixRecord> for DensityMatrix {
    type Error = Error;

    fn try_from(r: MatrixRecord) -> Result<Self> {
        DensityMatrix::new(r.to_matrix()?)
    }
}

impl From<DensityMatrix> for MatrixRecord {
    fn from(d: DensityMatrix) -> Self {
        MatrixRecord::from_matrix(d.matrix())
    }
}
