//! Dense complex matrix kernel.
//!
//! Everything here works on `nalgebra` dynamic matrices of `Complex64`. The
//! Hermitian eigensolver is the workhorse: square roots, absolute values and
//! logarithms of Hermitian matrices are all computed spectrally on top of it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type ComplexMatrix = DMatrix<Complex64>;
pub type ComplexVector = DVector<Complex64>;

/// Maximum elementwise asymmetry `|H - H^dag|` accepted as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Eigenvalues in `[-PSD_TOL, 0)` are clamped to zero; below that is an error.
pub const PSD_TOL: f64 = 1e-10;
/// Eigenvalues at or below `RANK_TOL * max(1, λ_max)` are round-off and
/// count as zero in square roots and factorizations.
pub const RANK_TOL: f64 = 1e-14;
/// Maximum `||V^dag V - I||_F` accepted as an isometry.
pub const ISOMETRY_TOL: f64 = 1e-10;

/// Eigen-decomposition `U diag(eigenvalues) U^dag` of a Hermitian matrix.
///
/// Eigenvalues are sorted ascending and the columns of `eigenvectors` follow
/// the same order.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: ComplexMatrix,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        self.map(|x| x)
    }

    /// Applies `f` to the eigenvalues: `U f(Λ) U^dag`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ComplexMatrix {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            scaled
                .column_mut(j)
                .scale_mut(f(lambda));
        }
        scaled * u.adjoint()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn is_square(a: &ComplexMatrix) -> bool {
    a.nrows() == a.ncols()
}

pub fn ensure_square(a: &ComplexMatrix) -> Result<()> {
    if is_square(a) {
        Ok(())
    } else {
        Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

pub fn ensure_finite(a: &ComplexMatrix) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Largest elementwise modulus of `A - A^dag`.
pub fn max_asymmetry(a: &ComplexMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// `(A + A^dag) / 2`.
pub fn hermitian_part(a: &ComplexMatrix) -> ComplexMatrix {
    (a + a.adjoint()).scale(0.5)
}

pub fn max_abs(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn identity(n: usize) -> ComplexMatrix {
    ComplexMatrix::identity(n, n)
}

/// Real part of `tr(A)`.
pub fn trace_re(a: &ComplexMatrix) -> f64 {
    a.trace().re
}

/// Kronecker product with the standard convention: the left factor's index
/// is the slowest.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

/// Builds a complex matrix from separate real and imaginary row-major parts.
pub fn from_rows(re: &[Vec<f64>], im: Option<&[Vec<f64>]>) -> Result<ComplexMatrix> {
    let rows = re.len();
    let cols = re.first().map_or(0, Vec::len);
    if re.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument("ragged real part".into()));
    }
    if let Some(im) = im {
        if im.len() != rows || im.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "imaginary part shape differs from real part".into(),
            ));
        }
    }
    let m = ComplexMatrix::from_fn(rows, cols, |i, j| {
        Complex64::new(re[i][j], im.map_or(0.0, |im| im[i][j]))
    });
    ensure_finite(&m)?;
    Ok(m)
}

pub fn from_real_diagonal(diag: &[f64]) -> ComplexMatrix {
    let n = diag.len();
    ComplexMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(diag[i], 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

pub fn hermitian_eig(h: &ComplexMatrix) -> Result<Spectrum> {
    hermitian_eig_with(h, HERMITIAN_TOL)
}

/// Eigen-decomposition of a Hermitian matrix with a caller-chosen asymmetry
/// tolerance. The input is symmetrized before decomposition.
pub fn hermitian_eig_with(h: &ComplexMatrix, tol: f64) -> Result<Spectrum> {
    ensure_square(h)?;
    ensure_finite(h)?;
    let asymmetry = max_asymmetry(h);
    if asymmetry > tol {
        return Err(Error::NotHermitian { asymmetry });
    }
    Ok(eig_unchecked(hermitian_part(h)))
}

fn eig_unchecked(h: ComplexMatrix) -> Spectrum {
    let n = h.nrows();
    if n == 0 {
        return Spectrum {
            eigenvalues: DVector::zeros(0),
            eigenvectors: ComplexMatrix::zeros(0, 0),
        };
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let eigenvectors = ComplexMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Spectrum {
        eigenvalues,
        eigenvectors,
    }
}

/// Spectrum of a matrix expected to be PSD, with eigenvalues in
/// `[-tol, 0)` clamped to zero.
pub fn psd_spectrum_with(a: &ComplexMatrix, tol: f64) -> Result<Spectrum> {
    let mut spec = hermitian_eig_with(a, HERMITIAN_TOL.max(tol))?;
    let min = spec.min_eigenvalue();
    if min < -tol {
        return Err(Error::NotPositive {
            min_eigenvalue: min,
        });
    }
    spec.eigenvalues.apply(|x| *x = x.max(0.0));
    Ok(spec)
}

pub fn psd_spectrum(a: &ComplexMatrix) -> Result<Spectrum> {
    psd_spectrum_with(a, PSD_TOL)
}

/// Principal square root `U sqrt(Λ) U^dag` of a Hermitian PSD matrix.
pub fn psd_sqrt(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    psd_sqrt_with(a, PSD_TOL)
}

pub fn psd_sqrt_with(a: &ComplexMatrix, tol: f64) -> Result<ComplexMatrix> {
    let spec = psd_spectrum_with(a, tol)?;
    let floor = rank_floor(&spec);
    Ok(spec.map(|l| if l > floor { l.sqrt() } else { 0.0 }))
}

pub fn rank_floor(spec: &Spectrum) -> f64 {
    let top = spec.eigenvalues.iter().copied().fold(1.0, f64::max);
    RANK_TOL * top
}

/// Thin factor `F` (`n x r`) with `F F^dag = A`, built from the eigenpairs
/// above the round-off floor: column `i` is `sqrt(λ_i) u_i`.
pub fn psd_factor(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let spec = psd_spectrum(a)?;
    let floor = rank_floor(&spec);
    let keep: Vec<usize> = (0..spec.dim())
        .filter(|&i| spec.eigenvalues[i] > floor)
        .collect();
    let n = spec.dim();
    Ok(ComplexMatrix::from_fn(n, keep.len(), |s, j| {
        let i = keep[j];
        spec.eigenvectors[(s, i)] * spec.eigenvalues[i].sqrt()
    }))
}

/// `tr|A| = Σ |λ_l|` for Hermitian `A`.
pub fn trace_abs(a: &ComplexMatrix) -> Result<f64> {
    let spec = hermitian_eig(a)?;
    Ok(spec.eigenvalues.iter().map(|l| l.abs()).sum())
}

/// Singular values of a general complex matrix (unordered).
pub fn singular_values(a: &ComplexMatrix) -> DVector<f64> {
    if a.is_empty() {
        return DVector::zeros(0);
    }
    a.clone().svd(false, false).singular_values
}

/// Trace norm `tr|A|`, the sum of singular values.
pub fn trace_norm(a: &ComplexMatrix) -> f64 {
    singular_values(a).sum()
}

pub fn isometry_deviation(v: &ComplexMatrix) -> f64 {
    let g = v.adjoint() * v;
    (g - identity(v.ncols())).norm()
}

/// Extends an isometry `V` (`N x n`, `V^dag V = I`) to an `N x N` unitary
/// whose first `n` columns are `V` exactly.
///
/// Missing columns are taken from the standard basis, greedily choosing the
/// basis vector with the largest component orthogonal to the current span and
/// orthogonalizing it with two passes of modified Gram-Schmidt.
pub fn complete_isometry(v: &ComplexMatrix) -> Result<ComplexMatrix> {
    complete_isometry_with(v, ISOMETRY_TOL)
}

pub fn complete_isometry_with(v: &ComplexMatrix, tol: f64) -> Result<ComplexMatrix> {
    ensure_finite(v)?;
    let (big, small) = v.shape();
    if small > big {
        return Err(Error::NotIsometry {
            deviation: f64::INFINITY,
        });
    }
    let deviation = isometry_deviation(v);
    if deviation > tol {
        return Err(Error::NotIsometry { deviation });
    }

    let mut basis: Vec<ComplexVector> = (0..small).map(|j| v.column(j).into_owned()).collect();
    let mut used = vec![false; big];
    while basis.len() < big {
        let mut best: Option<(usize, ComplexVector, f64)> = None;
        for (k, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let mut e = ComplexVector::zeros(big);
            e[k] = Complex64::new(1.0, 0.0);
            let r = orthogonalize(e, &basis);
            let norm = r.norm();
            if best.as_ref().is_none_or(|(_, _, b)| norm > *b) {
                best = Some((k, r, norm));
            }
        }
        let (k, r, norm) = best.expect("fewer basis vectors than dimension");
        used[k] = true;
        // second pass restores orthogonality lost to cancellation
        let r = orthogonalize(r.unscale(norm), &basis);
        let norm = r.norm();
        basis.push(r.unscale(norm));
    }

    let mut u = ComplexMatrix::zeros(big, big);
    for (j, col) in basis.iter().enumerate() {
        u.set_column(j, col);
    }
    // keep the given columns bit-for-bit
    for j in 0..small {
        u.set_column(j, &v.column(j));
    }
    Ok(u)
}

/// Unitary factor `W` of the polar decomposition `A = W |A|` of a square
/// matrix, so that `tr(W^dag A) = tr|A|`.
///
/// Built from the eigenvectors `y_i` of `A^dag A`: the left vectors are the
/// normalized `A y_i`, orthogonalized in order of decreasing singular value.
/// Directions where `A` vanishes (at or below `RANK_TOL * max(1, s_max)`)
/// are completed from the standard basis and paired with the remaining
/// `y_i`. Avoids the complex SVD, whose singular vectors are unreliable for
/// rank-deficient inputs.
pub fn polar_unitary(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    ensure_square(a)?;
    ensure_finite(a)?;
    let n = a.nrows();
    let spec = hermitian_eig(&hermitian_part(&(a.adjoint() * a)))?;
    let mut right: Vec<(f64, ComplexVector, ComplexVector)> = (0..n)
        .rev()
        .map(|i| {
            let y = spec.eigenvectors.column(i).into_owned();
            let ay = a * &y;
            (ay.norm(), y, ay)
        })
        .collect();
    right.sort_by(|p, q| q.0.total_cmp(&p.0));
    let floor = RANK_TOL * right.first().map_or(1.0, |r| r.0.max(1.0));

    let mut left: Vec<ComplexVector> = Vec::with_capacity(n);
    let mut paired: Vec<ComplexVector> = Vec::with_capacity(n);
    let mut rest: Vec<ComplexVector> = Vec::new();
    for (s, y, ay) in right {
        if s > floor {
            let x = orthogonalize(orthogonalize(ay.unscale(s), &left), &left);
            let norm = x.norm();
            if norm > 0.5 {
                left.push(x.unscale(norm));
                paired.push(y);
                continue;
            }
        }
        rest.push(y);
    }
    let mut x = ComplexMatrix::zeros(n, left.len());
    for (j, col) in left.iter().enumerate() {
        x.set_column(j, col);
    }
    let x = complete_isometry(&x)?;
    paired.extend(rest);
    let mut y = ComplexMatrix::zeros(n, n);
    for (j, col) in paired.iter().enumerate() {
        y.set_column(j, col);
    }
    Ok(x * y.adjoint())
}

fn orthogonalize(mut x: ComplexVector, basis: &[ComplexVector]) -> ComplexVector {
    for b in basis {
        let c = b.dotc(&x);
        x.axpy(-c, b, Complex64::new(1.0, 0.0));
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn ginibre(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| {
            Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
        })
    }

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
        hermitian_part(&ginibre(n, n, rng))
    }

    fn unitarity_error(u: &ComplexMatrix) -> f64 {
        let n = u.ncols();
        (u.adjoint() * u - identity(n))
            .norm()
            .max((u * u.adjoint() - identity(u.nrows())).norm())
    }

    #[test]
    fn diagonal_eigenvalues_are_sorted() {
        let spec = hermitian_eig(&from_real_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(spec.eigenvalues.as_slice(), &[1.0, 2.0, 3.0]);
        for j in 0..3 {
            let col = spec.eigenvectors.column(j);
            let ones = col.iter().filter(|z| (z.norm() - 1.0).abs() < 1e-14).count();
            assert_eq!(ones, 1, "eigenvectors of a diagonal matrix are basis vectors");
        }
    }

    #[test]
    fn pauli_x_spectrum() {
        let x = ComplexMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let spec = hermitian_eig(&x).unwrap();
        assert!((spec.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((spec.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_hermitian_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=8 {
            for _ in 0..50 {
                let h = random_hermitian(n, &mut rng);
                let spec = hermitian_eig(&h).unwrap();
                let err = (spec.reconstruct() - &h).norm() / h.norm().max(1e-300);
                assert!(err <= 1e-12, "n={n} reconstruction error {err:e}");
                assert!(unitarity_error(&spec.eigenvectors) <= 1e-12);
                assert!(spec
                    .eigenvalues
                    .as_slice()
                    .windows(2)
                    .all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let a = ComplexMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        match hermitian_eig(&a) {
            Err(Error::NotHermitian { asymmetry }) => assert!((asymmetry - 1.0).abs() < 1e-15),
            other => panic!("unexpected {other:?}"),
        }
        assert!(trace_abs(&a).is_err());
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i3 = identity(3);
        assert!((psd_sqrt(&i3).unwrap() - &i3).norm() < 1e-15);
        let d = psd_sqrt(&from_real_diagonal(&[4.0, 9.0, 0.0])).unwrap();
        assert!((d - from_real_diagonal(&[2.0, 3.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn sqrt_clamps_tiny_negatives_and_rejects_large_ones() {
        let tiny = from_real_diagonal(&[1.0, -5e-11]);
        let r = psd_sqrt(&tiny).unwrap();
        assert_eq!(r[(1, 1)], c(0.0));
        match psd_sqrt(&from_real_diagonal(&[1.0, -1e-6])) {
            Err(Error::NotPositive { min_eigenvalue }) => {
                assert!((min_eigenvalue + 1e-6).abs() < 1e-18)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sqrt_squares_back_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let n = 2 + trial % 7;
            let g = ginibre(n, n, &mut rng);
            let a = &g * g.adjoint();
            let s = psd_sqrt(&a).unwrap();
            assert!(max_asymmetry(&s) < 1e-12);
            let err = (&s * &s - &a).norm();
            assert!(err <= 1e-10, "n={n} err={err:e}");
            assert!((trace_abs(&a).unwrap() - trace_re(&a)).abs() <= 1e-10 * trace_re(&a));
        }
    }

    #[test]
    fn trace_abs_values() {
        assert!((trace_abs(&from_real_diagonal(&[-0.5, 0.0, 0.5])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(trace_abs(&ComplexMatrix::zeros(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn completes_single_column() {
        let v = ComplexMatrix::from_column_slice(2, 1, &[c(1.0), c(0.0)]);
        let u = complete_isometry(&v).unwrap();
        assert_eq!(u.shape(), (2, 2));
        assert_eq!(u.column(0), v.column(0));
        assert!(unitarity_error(&u) <= 1e-12);
    }

    #[test]
    fn completes_random_isometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for big in 1..=12 {
            for small in 1..=big {
                let g = ginibre(big, small, &mut rng);
                let q = g.qr().q();
                let u = complete_isometry(&q).unwrap();
                assert!(unitarity_error(&u) <= 1e-12, "{big}x{small}");
                for j in 0..small {
                    assert_eq!(u.column(j), q.column(j));
                }
            }
        }
    }

    #[test]
    fn rejects_non_isometry() {
        let v = ComplexMatrix::from_column_slice(2, 1, &[c(1.0), c(1.0)]);
        match complete_isometry(&v) {
            Err(Error::NotIsometry { deviation }) => assert!((deviation - 1.0).abs() < 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }
    #[test]
    fn polar_factor_of_rank_deficient_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=6 {
            for rank in 0..=n {
                let a = if rank == 0 {
                    ComplexMatrix::zeros(n, n)
                } else {
                    ginibre(n, rank, &mut rng) * ginibre(n, rank, &mut rng).adjoint()
                };
                let w = polar_unitary(&a).unwrap();
                assert!(unitarity_error(&w) <= 1e-12, "n={n} rank={rank}");
                let p = w.adjoint() * &a;
                assert!(max_asymmetry(&p) <= 1e-12);
                let overlap = p.trace();
                let norm = trace_norm(&a);
                assert!((overlap.re - norm).abs() <= 1e-12 * norm.max(1.0), "n={n} rank={rank}");
                assert!(overlap.im.abs() <= 1e-12);
            }
        }
    }
}
