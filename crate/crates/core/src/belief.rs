use nalgebra::{DMatrix, DVector};

use crate::covariance::{assert_psd, psd_tolerance, relative_asymmetry, symmetry_tolerance};
use crate::error::{EstimationError, Result};
use crate::scalar::Real;

fn validate<T: Real>(mean: &DVector<T>, cov: &DMatrix<T>, context: &'static str) -> Result<()> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(EstimationError::dim(
            context,
            format!("{n}x{n} covariance"),
            format!("{}x{}", cov.nrows(), cov.ncols()),
        ));
    }
    let asym = relative_asymmetry(cov);
    if asym > symmetry_tolerance::<T>() {
        return Err(EstimationError::Asymmetric {
            asymmetry: asym.to_f64_lossy(),
        });
    }
    if !assert_psd(cov, psd_tolerance::<T>())? {
        return Err(EstimationError::NotPositiveSemidefinite {
            min_eigenvalue: crate::covariance::min_eigenvalue(cov).to_f64_lossy(),
        });
    }
    Ok(())
}

/// A state estimate with its covariance, `(x̂, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief<T: Real> {
    mean: DVector<T>,
    cov: DMatrix<T>,
}

impl<T: Real> GaussianBelief<T> {
    /// Validates dimensions, symmetry and positive semidefiniteness.
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        validate(&mean, &cov, "GaussianBelief")?;
        Ok(Self { mean, cov })
    }

    /// Caller guarantees the invariants (used after the PSD gate).
    pub(crate) fn from_checked(mean: DVector<T>, cov: DMatrix<T>) -> Self {
        debug_assert_eq!(mean.len(), cov.nrows());
        Self { mean, cov }
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard uncertainties, the square roots of the covariance diagonal.
    pub fn std_devs(&self) -> DVector<T> {
        self.cov.diagonal().map(|v| v.max(T::zero()).sqrt())
    }

    pub fn into_parts(self) -> (DVector<T>, DMatrix<T>) {
        (self.mean, self.cov)
    }
}

/// Knowledge about uncertain model parameters: estimate `θ̂` and covariance `U_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterKnowledge<T: Real> {
    estimate: DVector<T>,
    cov: DMatrix<T>,
}

impl<T: Real> ParameterKnowledge<T> {
    pub fn new(estimate: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        validate(&estimate, &cov, "ParameterKnowledge")?;
        Ok(Self { estimate, cov })
    }

    /// No uncertain parameters.
    pub fn none() -> Self {
        Self {
            estimate: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        }
    }

    /// Exactly known parameter values.
    pub fn exact(estimate: DVector<T>) -> Self {
        let n = estimate.len();
        Self {
            estimate,
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn estimate(&self) -> &DVector<T> {
        &self.estimate
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.estimate.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn rejects_mismatched_dimensions() {
        let r = GaussianBelief::new(dvector![0.0, 0.0], DMatrix::<f64>::identity(3, 3));
        assert!(matches!(r, Err(EstimationError::Dimension { .. })));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let r = GaussianBelief::new(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, -1.0]);
        assert!(matches!(
            r,
            Err(EstimationError::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn std_devs_are_root_diagonal() {
        let b = GaussianBelief::new(dvector![1.0, 2.0], dmatrix![4.0, 1.0; 1.0, 9.0]).unwrap();
        assert_eq!(b.std_devs(), dvector![2.0, 3.0]);
    }

    #[test]
    fn semidefinite_is_accepted() {
        assert!(GaussianBelief::new(dvector![100.0, 0.01], dmatrix![0.0, 0.0; 0.0, 1e-4]).is_ok());
    }
}
