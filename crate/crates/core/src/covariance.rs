//! Covariance utilities: symmetrization, the PSD gate applied after every
//! filter step, a clamped-eigenvalue square root for sampling, and the
//! symmetric positive-definite solve used for gains.

use nalgebra::{DMatrix, DVector};

use crate::error::{EstimationError, Result};
use crate::scalar::Real;

/// Relative asymmetry accepted before a matrix is rejected as non-symmetric.
pub fn symmetry_tolerance<T: Real>() -> T {
    T::lit(1e-12).max(T::eps() * T::lit(100.0))
}

/// Default relative tolerance of the PSD gate.
pub fn psd_tolerance<T: Real>() -> T {
    T::lit(1e-10).max(T::eps() * T::lit(1000.0))
}

fn ensure_square<T: Real>(a: &DMatrix<T>, context: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(EstimationError::dim(
            context,
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(())
}

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    ensure_square(a, "symmetrize")?;
    let half = T::lit(0.5);
    let n = a.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            a[(i, i)]
        } else {
            (a[(i, j)] + a[(j, i)]) * half
        }
    }))
}

/// Largest `|A - Aᵀ|` entry relative to the Frobenius norm of `A`.
pub fn relative_asymmetry<T: Real>(a: &DMatrix<T>) -> T {
    let norm = a.norm();
    if norm == T::zero() {
        return T::zero();
    }
    let mut worst = T::zero();
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / norm
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    a.clone().symmetric_eigenvalues().min()
}

/// True iff the smallest eigenvalue is at least `-tol * ‖cov‖_F`.
///
/// Fails with [`EstimationError::Asymmetric`] when `cov` is not symmetric
/// within [`symmetry_tolerance`].
pub fn assert_psd<T: Real>(cov: &DMatrix<T>, tol: T) -> Result<bool> {
    ensure_square(cov, "assert_psd")?;
    let asym = relative_asymmetry(cov);
    if asym > symmetry_tolerance::<T>() {
        return Err(EstimationError::Asymmetric {
            asymmetry: asym.to_f64_lossy(),
        });
    }
    Ok(psd_within(cov, tol))
}

fn psd_within<T: Real>(cov: &DMatrix<T>, tol: T) -> bool {
    if cov.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let norm = cov.norm();
    if norm == T::zero() {
        return true;
    }
    // Cholesky of cov + tol‖cov‖ I succeeds iff λ_min > -tol‖cov‖; the
    // eigenvalues settle the borderline cases.
    let n = cov.nrows();
    let shifted = cov + DMatrix::identity(n, n) * (tol * norm);
    if shifted.cholesky().is_some() {
        return true;
    }
    min_eigenvalue(cov) >= -tol * norm
}

/// Symmetrizes `cov` and runs the PSD gate, turning a failure into an error.
pub(crate) fn gate<T: Real>(cov: DMatrix<T>) -> Result<DMatrix<T>> {
    let cov = symmetrize(&cov)?;
    if !psd_within(&cov, psd_tolerance::<T>()) {
        return Err(EstimationError::NotPositiveSemidefinite {
            min_eigenvalue: min_eigenvalue(&cov).to_f64_lossy(),
        });
    }
    Ok(cov)
}

/// Square-root factor `L` with `L Lᵀ = cov`, tolerant of semidefinite input.
///
/// Uses the symmetric eigendecomposition with negative eigenvalues (within
/// the PSD tolerance) clamped to zero, so rows of exact zeros are fine.
pub fn sqrt_factor<T: Real>(cov: &DMatrix<T>) -> Result<DMatrix<T>> {
    ensure_square(cov, "sqrt_factor")?;
    let n = cov.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = symmetrize(cov)?;
    if sym.iter().all(|v| *v == T::zero()) {
        return Ok(sym);
    }
    let eig = sym.clone().symmetric_eigen();
    let floor = -psd_tolerance::<T>() * sym.norm();
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if !lambda.is_finite() || lambda < floor {
            return Err(EstimationError::NotPositiveSemidefinite {
                min_eigenvalue: lambda.to_f64_lossy(),
            });
        }
        let s = lambda.max(T::zero()).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

/// Solves `S X = B` for symmetric positive-definite `S` via Cholesky.
///
/// `k` only labels the error.
pub fn spd_solve<T: Real>(s: &DMatrix<T>, b: &DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    if s.nrows() != b.nrows() {
        return Err(EstimationError::dim(
            "spd_solve",
            format!("{} rows", s.nrows()),
            format!("{} rows", b.nrows()),
        ));
    }
    let chol = symmetrize(s)?
        .cholesky()
        .ok_or(EstimationError::SingularInnovation { k })?;
    let x = chol.solve(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::SingularInnovation { k });
    }
    Ok(x)
}

/// Frobenius norm of `a - b` relative to `‖b‖_F` (absolute when `b = 0`).
pub fn relative_frobenius<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == T::zero() {
        diff
    } else {
        diff / scale
    }
}

/// Vector analogue of [`relative_frobenius`].
pub fn relative_norm<T: Real>(a: &DVector<T>, b: &DVector<T>) -> T {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == T::zero() {
        diff
    } else {
        diff / scale
    }
}

/// Block-diagonal matrix `diag(a, b)`.
pub fn block_diag<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows() + b.nrows();
    let m = a.ncols() + b.ncols();
    let mut out = DMatrix::zeros(n, m);
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn symmetrize_identity_is_fixed_point() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert_eq!(symmetrize(&i).unwrap(), i);
    }

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let a = dmatrix![1.0, 2.0; 0.0, 1.0];
        assert_eq!(symmetrize(&a).unwrap(), dmatrix![1.0, 1.0; 1.0, 1.0]);
    }

    #[test]
    fn symmetrize_rejects_non_square() {
        let a = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            symmetrize(&a),
            Err(EstimationError::Dimension { .. })
        ));
    }

    proptest! {
        #[test]
        fn symmetrize_removes_half_the_antisymmetric_part(v in prop::collection::vec(-10.0f64..10.0, 9)) {
            let a = DMatrix::from_vec(3, 3, v);
            let r = symmetrize(&a).unwrap();
            prop_assert_eq!(&r, &r.transpose());
            // R - A = (Aᵀ - A)/2, which is antisymmetric
            let d = &r - &a;
            let expected = (a.transpose() - &a) * 0.5;
            for (x, y) in d.iter().zip(expected.iter()) {
                prop_assert!((x - y).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn psd_gate_examples() {
        let tol = 1e-10;
        assert!(assert_psd(&DMatrix::<f64>::identity(3, 3), tol).unwrap());
        assert!(!assert_psd(&dmatrix![1.0, 0.0; 0.0, -1.0], tol).unwrap());
        // eigenvalues 1 and 3
        assert!(assert_psd(&dmatrix![2.0, 1.0; 1.0, 2.0], tol).unwrap());
        assert_relative_eq!(
            min_eigenvalue(&dmatrix![2.0, 1.0; 1.0, 2.0]),
            1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn psd_gate_rejects_asymmetric_input() {
        let a = dmatrix![1.0, 0.5; 0.0, 1.0];
        assert!(matches!(
            assert_psd(&a, 1e-10),
            Err(EstimationError::Asymmetric { .. })
        ));
    }

    #[test]
    fn sqrt_factor_handles_zero_rows() {
        let q = dmatrix![0.0, 0.0; 0.0, 1e-4];
        let l = sqrt_factor(&q).unwrap();
        assert_relative_eq!(&l * l.transpose(), q, epsilon = 1e-18);
    }

    #[test]
    fn sqrt_factor_rejects_indefinite() {
        assert!(sqrt_factor(&dmatrix![1.0, 0.0; 0.0, -1.0]).is_err());
    }

    #[test]
    fn spd_solve_reports_time_index() {
        let s = DMatrix::<f64>::zeros(1, 1);
        let b = DMatrix::<f64>::identity(1, 1);
        assert_eq!(
            spd_solve(&s, &b, 17),
            Err(EstimationError::SingularInnovation { k: 17 })
        );
    }

    #[test]
    fn block_diag_places_blocks() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        let b = dmatrix![5.0];
        let d = block_diag(&a, &b);
        assert_eq!(d, dmatrix![1.0, 2.0, 0.0; 3.0, 4.0, 0.0; 0.0, 0.0, 5.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let a = dmatrix![2.0f32, 1.0; 1.0, 2.0];
        assert!(assert_psd(&a, psd_tolerance::<f32>()).unwrap());
        let l = sqrt_factor(&a).unwrap();
        assert_relative_eq!(&l * l.transpose(), a, epsilon = 1e-5);
    }
}
