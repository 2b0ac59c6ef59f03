//! Extended Kalman filter, state augmentation for uncertain parameters, the
//! split `K₁`/`K₂` form of the augmented update, and linearized GUM
//! propagation through the EKF measurement model.

use nalgebra::{DMatrix, DVector};

use crate::belief::{GaussianBelief, ParameterKnowledge};
use crate::covariance::{block_diag, gate, spd_solve};
use crate::error::{EstimationError, Result};
use crate::kalman::{joseph_update, kf_gain, KalmanStep};
use crate::model::{
    eval_obs_jacobian, eval_state_jacobian, raw_obs_jacobian, raw_obs_param_jacobian,
    raw_state_jacobian, raw_state_param_jacobian, NonlinearModel,
};
use crate::scalar::Real;

fn finite_or<T: Real>(v: DVector<T>, what: &'static str, k: usize) -> Result<DVector<T>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(EstimationError::NonFinite {
            what,
            k,
            index: None,
        })
    }
}

/// Prediction `x = f(x̂(k-1), θ, k)`, `P = F P Fᵀ + Q` with `F = df/dx` at `x̂(k-1)`.
pub fn ekf_predict<T: Real, M: NonlinearModel<T> + ?Sized>(
    prev: &GaussianBelief<T>,
    model: &M,
    theta: &DVector<T>,
    k: usize,
) -> Result<GaussianBelief<T>> {
    let n = model.state_dim();
    if prev.dim() != n {
        return Err(EstimationError::dim("ekf_predict state", n, prev.dim()));
    }
    let mean = finite_or(model.state_fn(prev.mean(), theta, k), "predicted state", k)?;
    let f = eval_state_jacobian(model, prev.mean(), theta, k)?;
    let cov = gate(&f * prev.cov() * f.transpose() + model.process_noise(k))?;
    Ok(GaussianBelief::from_checked(mean, cov))
}

/// Correction with `H = dh/dx` at the predicted estimate; Joseph-form covariance.
pub fn ekf_correct<T: Real, M: NonlinearModel<T> + ?Sized>(
    predicted: &GaussianBelief<T>,
    y: &DVector<T>,
    model: &M,
    theta: &DVector<T>,
    k: usize,
) -> Result<KalmanStep<T>> {
    let n = model.state_dim();
    let p = model.obs_dim();
    if predicted.dim() != n {
        return Err(EstimationError::dim(
            "ekf_correct state",
            n,
            predicted.dim(),
        ));
    }
    if y.len() != p {
        return Err(EstimationError::dim("ekf_correct measurement", p, y.len()));
    }
    let h = eval_obs_jacobian(model, predicted.mean(), theta, k)?;
    let r = model.obs_noise(k);
    let gain = kf_gain(predicted.cov(), &h, &r, k)?;
    let innovation = y - model.obs_fn(predicted.mean(), theta, k);
    let mean = finite_or(predicted.mean() + &gain * &innovation, "corrected state", k)?;
    let cov = gate(joseph_update(predicted.cov(), &gain, &h, &r))?;
    Ok(KalmanStep {
        predicted: predicted.clone(),
        gain,
        corrected: GaussianBelief::from_checked(mean, cov),
        innovation,
    })
}

/// Linearized GUM propagation of `x(k-1)`, `z(k)` and `y(k)` through
/// `x(k) = x_{k,k-1} + K (y(k) - h(x_{k,k-1}))` with `x_{k,k-1} = f(x(k-1)) + z(k)`.
///
/// `K` is held at its value at `f(x̂(k-1))`. The covariance comes from the
/// sensitivity matrix and the joint input covariance.
pub fn propagate_nonlinear_gum_linearized<T: Real, M: NonlinearModel<T> + ?Sized>(
    prev: &GaussianBelief<T>,
    y: &GaussianBelief<T>,
    model: &M,
    theta: &DVector<T>,
    k: usize,
) -> Result<GaussianBelief<T>> {
    let n = model.state_dim();
    let p = model.obs_dim();
    if prev.dim() != n {
        return Err(EstimationError::dim("linearized GUM state", n, prev.dim()));
    }
    if y.dim() != p {
        return Err(EstimationError::dim(
            "linearized GUM measurement",
            p,
            y.dim(),
        ));
    }
    let f_jac = eval_state_jacobian(model, prev.mean(), theta, k)?;
    let q = model.process_noise(k);
    let r = model.obs_noise(k);
    let x_pred = finite_or(model.state_fn(prev.mean(), theta, k), "predicted state", k)?;
    let p_pred = &f_jac * prev.cov() * f_jac.transpose() + &q;
    let h_jac = eval_obs_jacobian(model, &x_pred, theta, k)?;
    let gain = kf_gain(&p_pred, &h_jac, &r, k)?;
    let a = DMatrix::identity(n, n) - &gain * &h_jac;

    let mut sens = DMatrix::zeros(n, 2 * n + p);
    sens.view_mut((0, 0), (n, n)).copy_from(&(&a * &f_jac));
    sens.view_mut((0, n), (n, n)).copy_from(&a);
    sens.view_mut((0, 2 * n), (n, p)).copy_from(&gain);
    let inputs = block_diag(&block_diag(prev.cov(), &q), y.cov());

    let mean = &x_pred + &gain * (y.mean() - model.obs_fn(&x_pred, theta, k));
    let cov = gate(&sens * inputs * sens.transpose())?;
    Ok(GaussianBelief::from_checked(
        finite_or(mean, "estimate", k)?,
        cov,
    ))
}

/// Runs the EKF over `measurements`, which are `y(1), y(2), ...`.
pub fn run_ekf<T: Real, M: NonlinearModel<T> + ?Sized>(
    prior: &GaussianBelief<T>,
    measurements: &[DVector<T>],
    model: &M,
    theta: &DVector<T>,
) -> Result<Vec<KalmanStep<T>>> {
    let mut steps = Vec::with_capacity(measurements.len());
    let mut current = prior.clone();
    for (i, y) in measurements.iter().enumerate() {
        let k = i + 1;
        let predicted = ekf_predict(&current, model, theta, k)?;
        let step = ekf_correct(&predicted, y, model, theta, k)?;
        current = step.corrected.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// A parametric model with `θ` appended to the state.
///
/// Drift `(x, θ) ↦ (f(x, θ, k), θ)`, observation `h(x, θ, k)`, process
/// noise `diag(Q(k), α² I)`.
#[derive(Debug, Clone)]
pub struct AugmentedModel<M, T: Real> {
    base: M,
    n_x: usize,
    n_theta: usize,
    alpha: T,
}

impl<M, T: Real> AugmentedModel<M, T> {
    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    fn split(&self, z: &DVector<T>) -> (DVector<T>, DVector<T>) {
        (
            z.rows(0, self.n_x).into_owned(),
            z.rows(self.n_x, self.n_theta).into_owned(),
        )
    }
}

/// Appends the uncertain parameters to the state.
///
/// The initial belief has mean `(x̂(0), θ̂)` and covariance
/// `diag(Pˣ(0), U_θ)`.
pub fn augment<T: Real, M: NonlinearModel<T>>(
    model: M,
    prior: &GaussianBelief<T>,
    theta: &ParameterKnowledge<T>,
    alpha: T,
) -> Result<(AugmentedModel<M, T>, GaussianBelief<T>)> {
    if !alpha.is_finite() || alpha < T::zero() {
        return Err(EstimationError::Config(
            "parameter process-noise std must be finite and non-negative".into(),
        ));
    }
    let n_x = model.state_dim();
    if prior.dim() != n_x {
        return Err(EstimationError::dim("augment prior", n_x, prior.dim()));
    }
    if theta.dim() != model.param_dim() {
        return Err(EstimationError::dim(
            "augment parameters",
            model.param_dim(),
            theta.dim(),
        ));
    }
    let n_theta = theta.dim();
    let mean = DVector::from_iterator(
        n_x + n_theta,
        prior.mean().iter().chain(theta.estimate().iter()).copied(),
    );
    let cov = block_diag(prior.cov(), theta.cov());
    let belief = GaussianBelief::new(mean, cov)?;
    Ok((
        AugmentedModel {
            base: model,
            n_x,
            n_theta,
            alpha,
        },
        belief,
    ))
}

impl<T: Real, M: NonlinearModel<T>> NonlinearModel<T> for AugmentedModel<M, T> {
    fn state_dim(&self) -> usize {
        self.n_x + self.n_theta
    }

    fn obs_dim(&self) -> usize {
        self.base.obs_dim()
    }

    fn state_fn(&self, z: &DVector<T>, _theta: &DVector<T>, k: usize) -> DVector<T> {
        let (x, th) = self.split(z);
        let fx = self.base.state_fn(&x, &th, k);
        DVector::from_iterator(self.state_dim(), fx.iter().chain(th.iter()).copied())
    }

    fn obs_fn(&self, z: &DVector<T>, _theta: &DVector<T>, k: usize) -> DVector<T> {
        let (x, th) = self.split(z);
        self.base.obs_fn(&x, &th, k)
    }

    fn process_noise(&self, k: usize) -> DMatrix<T> {
        let a2 = DMatrix::identity(self.n_theta, self.n_theta) * (self.alpha * self.alpha);
        block_diag(&self.base.process_noise(k), &a2)
    }

    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        self.base.obs_noise(k)
    }

    fn state_jacobian(&self, z: &DVector<T>, _theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        let (x, th) = self.split(z);
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        jac.view_mut((0, 0), (self.n_x, self.n_x))
            .copy_from(&raw_state_jacobian(&self.base, &x, &th, k));
        if self.n_theta > 0 {
            jac.view_mut((0, self.n_x), (self.n_x, self.n_theta))
                .copy_from(&raw_state_param_jacobian(&self.base, &x, &th, k));
            jac.view_mut((self.n_x, self.n_x), (self.n_theta, self.n_theta))
                .fill_with_identity();
        }
        Some(jac)
    }

    fn obs_jacobian(&self, z: &DVector<T>, _theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        let (x, th) = self.split(z);
        let p = self.obs_dim();
        let mut jac = DMatrix::zeros(p, self.state_dim());
        jac.view_mut((0, 0), (p, self.n_x))
            .copy_from(&raw_obs_jacobian(&self.base, &x, &th, k));
        if self.n_theta > 0 {
            jac.view_mut((0, self.n_x), (p, self.n_theta))
                .copy_from(&raw_obs_param_jacobian(&self.base, &x, &th, k));
        }
        Some(jac)
    }
}

/// Gains and innovation covariance of the partitioned augmented update.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitUpdate<T: Real> {
    /// Gain for the original state, n_x×p.
    pub k1: DMatrix<T>,
    /// Gain for the parameters, n_θ×p.
    pub k2: DMatrix<T>,
    /// Innovation covariance `H_θ P Hᵀ_θ + R`.
    pub s: DMatrix<T>,
    /// `(C, D)` with `D = d(h)/dθ`, p×(n_x+n_θ).
    pub h_theta: DMatrix<T>,
    pub innovation: DVector<T>,
    /// Re-assembled `(x̂(k), θ̂(k))` and `[[Pˣ, P^{x,θ}], [P^{θ,x}, P^θ]]`.
    pub corrected: GaussianBelief<T>,
}

/// Correction of an augmented belief written as separate equations for `x` and `θ`.
pub fn split_update<T: Real, M: NonlinearModel<T>>(
    predicted: &GaussianBelief<T>,
    y: &DVector<T>,
    model: &AugmentedModel<M, T>,
    k: usize,
) -> Result<SplitUpdate<T>> {
    let nx = model.n_x;
    let nt = model.n_theta;
    if predicted.dim() != nx + nt {
        return Err(EstimationError::dim(
            "split_update state",
            nx + nt,
            predicted.dim(),
        ));
    }
    let p = model.obs_dim();
    if y.len() != p {
        return Err(EstimationError::dim("split_update measurement", p, y.len()));
    }
    let none = DVector::zeros(0);
    let h_theta = eval_obs_jacobian(model, predicted.mean(), &none, k)?;
    let c = h_theta.columns(0, nx).into_owned();
    let d = h_theta.columns(nx, nt).into_owned();

    let cov = predicted.cov();
    let px = cov.view((0, 0), (nx, nx));
    let pxt = cov.view((0, nx), (nx, nt));
    let ptx = cov.view((nx, 0), (nt, nx));
    let pt = cov.view((nx, nx), (nt, nt));

    let r = model.obs_noise(k);
    let s = &c * px * c.transpose()
        + &c * pxt * d.transpose()
        + &d * ptx * c.transpose()
        + &d * pt * d.transpose()
        + &r;

    // K₁ = (Pˣ Cᵀ + P^{x,θ} Dᵀ) S⁻¹, K₂ = (P^{θ,x} Cᵀ + P^θ Dᵀ) S⁻¹
    let k1_num = px * c.transpose() + pxt * d.transpose();
    let k2_num = ptx * c.transpose() + pt * d.transpose();
    let k1 = spd_solve(&s, &k1_num.transpose(), k)?.transpose();
    let k2 = spd_solve(&s, &k2_num.transpose(), k)?.transpose();

    let innovation = y - model.obs_fn(predicted.mean(), &none, k);
    let x_pred = predicted.mean().rows(0, nx);
    let t_pred = predicted.mean().rows(nx, nt);
    let x_new = x_pred + &k1 * &innovation;
    let t_new = t_pred + &k2 * &innovation;

    let px_new = px - &k1 * &s * k1.transpose();
    let pt_new = pt - &k2 * &s * k2.transpose();
    let pxt_new = pxt - &k1 * &s * k2.transpose();

    let mut cov_new = DMatrix::zeros(nx + nt, nx + nt);
    cov_new.view_mut((0, 0), (nx, nx)).copy_from(&px_new);
    cov_new.view_mut((nx, nx), (nt, nt)).copy_from(&pt_new);
    cov_new.view_mut((0, nx), (nx, nt)).copy_from(&pxt_new);
    cov_new
        .view_mut((nx, 0), (nt, nx))
        .copy_from(&pxt_new.transpose());
    let mean = DVector::from_iterator(nx + nt, x_new.iter().chain(t_new.iter()).copied());

    Ok(SplitUpdate {
        k1,
        k2,
        s,
        h_theta,
        innovation,
        corrected: GaussianBelief::from_checked(
            finite_or(mean, "corrected state", k)?,
            gate(cov_new)?,
        ),
    })
}
