//! Addressable random-number substreams and multivariate normal sampling.
//!
//! A [`RngStreamPlan`] maps `(trial, time index, label)` to its own ChaCha8
//! stream: the 256-bit key packs the master seed, the time index and the
//! label, and the ChaCha stream id carries the trial index. Distinct triples
//! therefore select distinct keystreams, and nothing is stored per trial, so
//! trials can be evaluated in any order or in parallel and still see the
//! same draws.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::sqrt_factor;
use crate::error::{EstimationError, Result};
use crate::scalar::Real;

/// Identifies which input quantity a substream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamLabel {
    /// Initial-state draws, `x(0)`.
    Prior = 1,
    /// Uncertain model parameters, `θ`.
    Parameter = 2,
    /// Measurement draws `y(k) ~ N(ŷ(k), R(k))`.
    Measurement = 3,
    /// State-noise draws `z(k) ~ N(0, Q(k))`.
    ProcessNoise = 4,
    /// Multinomial resampling uniforms.
    Resample = 5,
    /// State noise of the simulated system.
    SimulationState = 6,
    /// Measurement noise of the simulated system.
    SimulationMeasurement = 7,
}

/// Deterministic plan of random substreams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreamPlan {
    pub master_seed: u64,
}

const DOMAIN_TAG: u64 = 0x6b66_6775_6d5f_7631; // "kfgum_v1"

impl RngStreamPlan {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Substream for trial (or particle) `m` at time index `k`.
    pub fn substream(&self, m: u64, k: u64, label: StreamLabel) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&k.to_le_bytes());
        key[16..24].copy_from_slice(&(label as u64).to_le_bytes());
        key[24..32].copy_from_slice(&DOMAIN_TAG.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(m);
        rng
    }
}

/// Sampler for `N(mean, cov)` with a precomputed square-root factor.
#[derive(Debug, Clone)]
pub struct MvnSampler<T: Real> {
    mean: DVector<T>,
    factor: DMatrix<T>,
    degenerate: bool,
}

impl<T: Real> MvnSampler<T> {
    pub fn new(mean: DVector<T>, cov: &DMatrix<T>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(EstimationError::dim(
                "mvn_sample",
                format!("{n}x{n} covariance", n = mean.len()),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let factor = sqrt_factor(cov)?;
        let degenerate = factor.iter().all(|v| *v == T::zero());
        Ok(Self {
            mean,
            factor,
            degenerate,
        })
    }

    /// Zero-mean sampler.
    pub fn centered(cov: &DMatrix<T>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        if self.degenerate {
            return self.mean.clone();
        }
        let z = DVector::from_fn(self.mean.len(), |_, _| T::standard_normal(rng));
        &self.mean + &self.factor * z
    }
}

/// One draw from `N(mean, cov)`; a zero covariance returns `mean` exactly.
pub fn mvn_sample<T: Real, R: rand::Rng + ?Sized>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    Ok(MvnSampler::new(mean.clone(), cov)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::RngCore;

    #[test]
    fn same_key_same_stream() {
        let plan = RngStreamPlan::new(42);
        let mut a = plan.substream(7, 3, StreamLabel::Measurement);
        let mut b = plan.substream(7, 3, StreamLabel::Measurement);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_triples_give_distinct_streams() {
        let plan = RngStreamPlan::new(42);
        let first = |m, k, l| plan.substream(m, k, l).next_u64();
        let base = first(1, 1, StreamLabel::Measurement);
        assert_ne!(base, first(2, 1, StreamLabel::Measurement));
        assert_ne!(base, first(1, 2, StreamLabel::Measurement));
        assert_ne!(base, first(1, 1, StreamLabel::ProcessNoise));
        assert_ne!(
            base,
            RngStreamPlan::new(43)
                .substream(1, 1, StreamLabel::Measurement)
                .next_u64()
        );
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let plan = RngStreamPlan::new(1);
        let mean = dvector![1.5, -2.0];
        let x = mvn_sample(
            &mean,
            &DMatrix::zeros(2, 2),
            &mut plan.substream(0, 0, StreamLabel::Prior),
        )
        .unwrap();
        assert_eq!(x, mean);
    }

    #[test]
    fn scalar_moments() {
        let plan = RngStreamPlan::new(11);
        let s = MvnSampler::new(dvector![0.0], &dmatrix![1.0]).unwrap();
        let mut rng = plan.substream(0, 0, StreamLabel::Prior);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.sample(&mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn bivariate_covariance() {
        let plan = RngStreamPlan::new(12);
        let cov = dmatrix![1.0, 0.5; 0.5, 1.0];
        let s = MvnSampler::new(dvector![0.0, 0.0], &cov).unwrap();
        let mut rng = plan.substream(0, 0, StreamLabel::Prior);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        let mut mean = DVector::<f64>::zeros(2);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| s.sample(&mut rng)).collect();
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        for d in &draws {
            let c = d - &mean;
            acc += &c * c.transpose();
        }
        acc /= (n - 1) as f64;
        for (a, b) in acc.iter().zip(cov.iter()) {
            assert!((a - b).abs() < 0.02, "{acc}");
        }
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let r = MvnSampler::new(dvector![0.0, 0.0], &dmatrix![1.0, 0.0; 0.0, -1.0]);
        assert!(matches!(
            r,
            Err(EstimationError::NotPositiveSemidefinite { .. })
        ));
    }
}
