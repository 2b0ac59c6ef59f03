//! Linear Kalman filter and the analytic GUM propagation through its
//! measurement model.

use nalgebra::{DMatrix, DVector};

use crate::belief::GaussianBelief;
use crate::covariance::{block_diag, gate, spd_solve};
use crate::error::{EstimationError, Result};
use crate::model::LinearModel;
use crate::scalar::Real;

/// Result of one predict/correct cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStep<T: Real> {
    /// `(x_{k,k-1}, P_{k,k-1})`.
    pub predicted: GaussianBelief<T>,
    /// Kalman gain `K(k)`, n×p.
    pub gain: DMatrix<T>,
    /// `(x̂(k), P(k))`.
    pub corrected: GaussianBelief<T>,
    /// `y(k) - h(x_{k,k-1})`.
    pub innovation: DVector<T>,
}

fn expect_shape<T: Real>(
    m: &DMatrix<T>,
    rows: usize,
    cols: usize,
    context: &'static str,
) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(EstimationError::dim(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

/// Prediction: `x = F x̂(k-1)`, `P = F P(k-1) Fᵀ + Q(k)`.
pub fn kf_predict<T: Real, M: LinearModel<T> + ?Sized>(
    prev: &GaussianBelief<T>,
    model: &M,
    theta: &DVector<T>,
    k: usize,
) -> Result<GaussianBelief<T>> {
    let n = model.state_dim();
    if prev.dim() != n {
        return Err(EstimationError::dim("kf_predict state", n, prev.dim()));
    }
    let f = model.transition(k, theta);
    let q = model.process_noise(k);
    expect_shape(&f, n, n, "kf_predict F")?;
    expect_shape(&q, n, n, "kf_predict Q")?;
    let mean = &f * prev.mean();
    let cov = gate(&f * prev.cov() * f.transpose() + q)?;
    Ok(GaussianBelief::from_checked(mean, cov))
}

/// Kalman gain `K = P Cᵀ (C P Cᵀ + R)⁻¹`, via a symmetric positive-definite solve.
///
/// `k` is reported if the innovation covariance is singular.
pub fn kf_gain<T: Real>(
    predicted_cov: &DMatrix<T>,
    c: &DMatrix<T>,
    r: &DMatrix<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    let n = predicted_cov.nrows();
    let p = c.nrows();
    expect_shape(predicted_cov, n, n, "kf_gain P")?;
    expect_shape(c, p, n, "kf_gain C")?;
    expect_shape(r, p, p, "kf_gain R")?;
    let cp = c * predicted_cov;
    let s = &cp * c.transpose() + r;
    // S Kᵀ = C P
    Ok(spd_solve(&s, &cp, k)?.transpose())
}

/// Joseph-form covariance update `(I-KC) P (I-KC)ᵀ + K R Kᵀ`.
pub fn joseph_update<T: Real>(
    p: &DMatrix<T>,
    gain: &DMatrix<T>,
    c: &DMatrix<T>,
    r: &DMatrix<T>,
) -> DMatrix<T> {
    let n = p.nrows();
    let a = DMatrix::identity(n, n) - gain * c;
    &a * p * a.transpose() + gain * r * gain.transpose()
}

/// Short-form covariance update `(I-KC) P`, kept as a cross-check.
pub fn simple_update<T: Real>(p: &DMatrix<T>, gain: &DMatrix<T>, c: &DMatrix<T>) -> DMatrix<T> {
    let n = p.nrows();
    (DMatrix::identity(n, n) - gain * c) * p
}

/// Correction with measurement `y(k)`; covariance in Joseph form.
pub fn kf_correct<T: Real, M: LinearModel<T> + ?Sized>(
    predicted: &GaussianBelief<T>,
    y: &DVector<T>,
    model: &M,
    theta: &DVector<T>,
    k: usize,
) -> Result<KalmanStep<T>> {
    let n = model.state_dim();
    let p = model.obs_dim();
    if predicted.dim() != n {
        return Err(EstimationError::dim("kf_correct state", n, predicted.dim()));
    }
    if y.len() != p {
        return Err(EstimationError::dim("kf_correct measurement", p, y.len()));
    }
    let c = model.observation(k, theta);
    let r = model.obs_noise(k);
    let gain = kf_gain(predicted.cov(), &c, &r, k)?;
    let innovation = y - &c * predicted.mean();
    let mean = predicted.mean() + &gain * &innovation;
    let cov = gate(joseph_update(predicted.cov(), &gain, &c, &r))?;
    Ok(KalmanStep {
        predicted: predicted.clone(),
        gain,
        corrected: GaussianBelief::from_checked(mean, cov),
        innovation,
    })
}

/// Analytic GUM propagation of `x(k-1)`, `z(k)` and `y(k)` through the
/// Kalman measurement model `x(k) = (I-KC)(F x(k-1) + z(k)) + K y(k)`.
///
/// The inputs are independent; `y` carries the state of knowledge
/// `N(ŷ(k), R)` about the measurement. The result is built from the
/// sensitivity matrix and the joint input covariance rather than the filter
/// recursion, so it can certify the filter output.
pub fn propagate_linear_gum<T: Real, M: LinearModel<T> + ?Sized>(
    prev: &GaussianBelief<T>,
    y: &GaussianBelief<T>,
    model: &M,
    theta: &DVector<T>,
    k: usize,
) -> Result<GaussianBelief<T>> {
    let n = model.state_dim();
    let p = model.obs_dim();
    if prev.dim() != n {
        return Err(EstimationError::dim(
            "propagate_linear_gum state",
            n,
            prev.dim(),
        ));
    }
    if y.dim() != p {
        return Err(EstimationError::dim(
            "propagate_linear_gum measurement",
            p,
            y.dim(),
        ));
    }
    let f = model.transition(k, theta);
    let c = model.observation(k, theta);
    let q = model.process_noise(k);
    let r = model.obs_noise(k);
    expect_shape(&f, n, n, "propagate_linear_gum F")?;
    expect_shape(&q, n, n, "propagate_linear_gum Q")?;

    let predicted_cov = &f * prev.cov() * f.transpose() + &q;
    let gain = kf_gain(&predicted_cov, &c, &r, k)?;
    let a = DMatrix::identity(n, n) - &gain * &c;

    // sensitivities with respect to (x(k-1), z(k), y(k))
    let mut sens = DMatrix::zeros(n, 2 * n + p);
    sens.view_mut((0, 0), (n, n)).copy_from(&(&a * &f));
    sens.view_mut((0, n), (n, n)).copy_from(&a);
    sens.view_mut((0, 2 * n), (n, p)).copy_from(&gain);
    let inputs = block_diag(&block_diag(prev.cov(), &q), y.cov());

    let mean = &a * &f * prev.mean() + &gain * y.mean();
    let cov = gate(&sens * inputs * sens.transpose())?;
    Ok(GaussianBelief::from_checked(mean, cov))
}

/// Runs the filter over `measurements[0..]`, which are `y(1), y(2), ...`.
pub fn run_kalman<T: Real, M: LinearModel<T> + ?Sized>(
    prior: &GaussianBelief<T>,
    measurements: &[DVector<T>],
    model: &M,
    theta: &DVector<T>,
) -> Result<Vec<KalmanStep<T>>> {
    let mut steps = Vec::with_capacity(measurements.len());
    let mut current = prior.clone();
    for (i, y) in measurements.iter().enumerate() {
        let k = i + 1;
        let predicted = kf_predict(&current, model, theta, k)?;
        let step = kf_correct(&predicted, y, model, theta, k)?;
        current = step.corrected.clone();
        steps.push(step);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{assert_psd, relative_frobenius};
    use crate::model::ConstantLinearModel;
    use nalgebra::{dmatrix, dvector};

    fn scalar(f: f64, q: f64, r: f64) -> ConstantLinearModel<f64> {
        ConstantLinearModel::new(dmatrix![f], dmatrix![1.0], dmatrix![q], dmatrix![r]).unwrap()
    }

    fn none() -> DVector<f64> {
        DVector::zeros(0)
    }

    #[test]
    fn identity_dynamics_without_noise_is_a_no_op() {
        let m = ConstantLinearModel::new(
            DMatrix::identity(2, 2),
            dmatrix![1.0, 0.0],
            DMatrix::zeros(2, 2),
            dmatrix![1.0],
        )
        .unwrap();
        let b = GaussianBelief::new(dvector![1.0, 2.0], dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        assert_eq!(kf_predict(&b, &m, &none(), 1).unwrap(), b);
    }

    #[test]
    fn scalar_prediction_adds_process_noise() {
        let b = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let p = kf_predict(&b, &scalar(1.0, 0.5, 1.0), &none(), 1).unwrap();
        assert_eq!(p.cov()[(0, 0)], 1.5);
    }

    #[test]
    fn gain_examples() {
        let one: DMatrix<f64> = dmatrix![1.0];
        assert!((kf_gain(&one, &one, &one, 1).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        let k = kf_gain(&one, &one, &dmatrix![1e12], 1).unwrap();
        assert!(k[(0, 0)].abs() <= 1e-11);
        let k = kf_gain(&dmatrix![0.0], &one, &one, 1).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn gain_reports_singular_innovation() {
        let z = dmatrix![0.0];
        assert_eq!(
            kf_gain(&z, &dmatrix![1.0], &z, 9),
            Err(EstimationError::SingularInnovation { k: 9 })
        );
    }

    #[test]
    fn scalar_correction_matches_conjugate_update() {
        let m = scalar(1.0, 0.0, 1.0);
        let predicted = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let step = kf_correct(&predicted, &dvector![2.0], &m, &none(), 1).unwrap();
        // posterior precision 1 + 1
        assert!((step.corrected.mean()[0] - 1.0).abs() < 1e-15);
        assert!((step.corrected.cov()[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(step.innovation, dvector![2.0]);
    }

    #[test]
    fn zero_innovation_leaves_mean() {
        let m = scalar(1.0, 0.0, 1.0);
        let predicted = GaussianBelief::new(dvector![3.0], dmatrix![2.0]).unwrap();
        let step = kf_correct(&predicted, &dvector![3.0], &m, &none(), 1).unwrap();
        assert_eq!(step.corrected.mean(), predicted.mean());
    }

    #[test]
    fn uninformative_measurement_leaves_belief() {
        let m = scalar(1.0, 0.0, 1e12);
        let predicted = GaussianBelief::new(dvector![3.0], dmatrix![2.0]).unwrap();
        let step = kf_correct(&predicted, &dvector![100.0], &m, &none(), 1).unwrap();
        assert!(relative_frobenius(step.corrected.cov(), predicted.cov()) < 1e-9);
        assert!((step.corrected.mean()[0] - 3.0).abs() / 3.0 < 1e-9);
        let y = GaussianBelief::new(dvector![100.0], dmatrix![1e12]).unwrap();
        let prev = GaussianBelief::new(dvector![3.0], dmatrix![2.0]).unwrap();
        let gum = propagate_linear_gum(&prev, &y, &m, &none(), 1).unwrap();
        assert!(relative_frobenius(gum.cov(), predicted.cov()) < 1e-9);
    }

    #[test]
    fn corrected_cov_matches_short_form() {
        let m = ConstantLinearModel::new(
            dmatrix![1.0, 0.1; 0.0, 1.0],
            dmatrix![1.0, 0.0],
            dmatrix![0.0, 0.0; 0.0, 0.01],
            dmatrix![0.5],
        )
        .unwrap();
        let predicted =
            GaussianBelief::new(dvector![0.0, 1.0], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let step = kf_correct(&predicted, &dvector![0.4], &m, &none(), 1).unwrap();
        let short = simple_update(predicted.cov(), &step.gain, &m.c);
        assert!(relative_frobenius(step.corrected.cov(), &short) < 1e-12);
        // Loewner order: predicted - corrected is PSD
        let diff = predicted.cov() - step.corrected.cov();
        assert!(assert_psd(&diff, 1e-10).unwrap());
    }

    #[test]
    fn scalar_gum_matches_filter() {
        let m = scalar(1.0, 0.0, 1.0);
        let prev = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let y = GaussianBelief::new(dvector![2.0], dmatrix![1.0]).unwrap();
        let gum = propagate_linear_gum(&prev, &y, &m, &none(), 1).unwrap();
        assert!((gum.mean()[0] - 1.0).abs() < 1e-15);
        assert!((gum.cov()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = scalar(1.0, 0.0, 1.0);
        let b = GaussianBelief::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            kf_predict(&b, &m, &none(), 1),
            Err(EstimationError::Dimension { .. })
        ));
    }

    #[test]
    fn single_precision_filter_runs() {
        let m = ConstantLinearModel::new(
            dmatrix![1.0f32],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![1.0],
        )
        .unwrap();
        let predicted = GaussianBelief::new(dvector![0.0f32], dmatrix![1.0]).unwrap();
        let step = kf_correct(&predicted, &dvector![2.0f32], &m, &DVector::zeros(0), 1).unwrap();
        assert!((step.corrected.mean()[0] - 1.0f32).abs() < 1e-6);
        assert!((step.corrected.cov()[(0, 0)] - 0.5f32).abs() < 1e-6);
    }
}
