//! System descriptions consumed by the filters.
//!
//! Time-index convention: `transition(k, θ)` / `state_fn(x, θ, k)` map the
//! state at `k - 1` to the state at `k`, and `observation(k, θ)` /
//! `obs_fn(x, θ, k)` produce the measurement `y(k)`. The state-noise shaping
//! matrix is the identity.

use nalgebra::{DMatrix, DVector};

use crate::error::{EstimationError, Result};
use crate::scalar::Real;

/// Linear state-space model `x(k) = F(θ,k) x(k-1) + w`, `y(k) = C(θ,k) x(k) + v`.
pub trait LinearModel<T: Real>: Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize {
        0
    }
    fn transition(&self, k: usize, theta: &DVector<T>) -> DMatrix<T>;
    fn observation(&self, k: usize, theta: &DVector<T>) -> DMatrix<T>;
    fn process_noise(&self, k: usize) -> DMatrix<T>;
    fn obs_noise(&self, k: usize) -> DMatrix<T>;
}

/// Nonlinear model `x(k) = f(x(k-1), θ, k) + w`, `y(k) = h(x(k), θ, k) + v`.
///
/// Jacobians are optional; missing ones fall back to central differences.
pub trait NonlinearModel<T: Real>: Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize {
        0
    }
    fn state_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T>;
    fn obs_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T>;
    fn process_noise(&self, k: usize) -> DMatrix<T>;
    fn obs_noise(&self, k: usize) -> DMatrix<T>;

    /// `df/dx`.
    fn state_jacobian(
        &self,
        _x: &DVector<T>,
        _theta: &DVector<T>,
        _k: usize,
    ) -> Option<DMatrix<T>> {
        None
    }
    /// `dh/dx`.
    fn obs_jacobian(&self, _x: &DVector<T>, _theta: &DVector<T>, _k: usize) -> Option<DMatrix<T>> {
        None
    }
    /// `df/dθ`.
    fn state_param_jacobian(
        &self,
        _x: &DVector<T>,
        _theta: &DVector<T>,
        _k: usize,
    ) -> Option<DMatrix<T>> {
        None
    }
    /// `dh/dθ`.
    fn obs_param_jacobian(
        &self,
        _x: &DVector<T>,
        _theta: &DVector<T>,
        _k: usize,
    ) -> Option<DMatrix<T>> {
        None
    }
}

impl<T: Real, M: LinearModel<T> + ?Sized> LinearModel<T> for &M {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn transition(&self, k: usize, theta: &DVector<T>) -> DMatrix<T> {
        (**self).transition(k, theta)
    }
    fn observation(&self, k: usize, theta: &DVector<T>) -> DMatrix<T> {
        (**self).observation(k, theta)
    }
    fn process_noise(&self, k: usize) -> DMatrix<T> {
        (**self).process_noise(k)
    }
    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        (**self).obs_noise(k)
    }
}

impl<T: Real, M: NonlinearModel<T> + ?Sized> NonlinearModel<T> for &M {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn state_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T> {
        (**self).state_fn(x, theta, k)
    }
    fn obs_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T> {
        (**self).obs_fn(x, theta, k)
    }
    fn process_noise(&self, k: usize) -> DMatrix<T> {
        (**self).process_noise(k)
    }
    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        (**self).obs_noise(k)
    }
    fn state_jacobian(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        (**self).state_jacobian(x, theta, k)
    }
    fn obs_jacobian(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        (**self).obs_jacobian(x, theta, k)
    }
    fn state_param_jacobian(
        &self,
        x: &DVector<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Option<DMatrix<T>> {
        (**self).state_param_jacobian(x, theta, k)
    }
    fn obs_param_jacobian(
        &self,
        x: &DVector<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Option<DMatrix<T>> {
        (**self).obs_param_jacobian(x, theta, k)
    }
}

/// Relative step used by the central-difference fallback.
pub fn fd_step<T: Real>() -> T {
    T::lit(1e-6).max(T::eps().cbrt())
}

/// Central-difference Jacobian of `g` at `at`, step `fd_step() * (|atᵢ| + 1)`.
pub fn central_difference<T: Real>(
    at: &DVector<T>,
    out_dim: usize,
    g: impl Fn(&DVector<T>) -> DVector<T>,
) -> DMatrix<T> {
    let mut jac = DMatrix::zeros(out_dim, at.len());
    let mut probe = at.clone();
    let two = T::lit(2.0);
    for j in 0..at.len() {
        let h = fd_step::<T>() * (at[j].abs() + T::one());
        probe[j] = at[j] + h;
        let plus = g(&probe);
        probe[j] = at[j] - h;
        let minus = g(&probe);
        probe[j] = at[j];
        jac.set_column(j, &((plus - minus) / (two * h)));
    }
    jac
}

fn check_finite<T: Real>(m: DMatrix<T>, what: &'static str, k: usize) -> Result<DMatrix<T>> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(EstimationError::NonFinite {
            what,
            k,
            index: None,
        })
    }
}

/// `df/dx`, supplied or by central differences; entries may be non-finite.
pub(crate) fn raw_state_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> DMatrix<T> {
    model.state_jacobian(x, theta, k).unwrap_or_else(|| {
        central_difference(x, model.state_dim(), |p| model.state_fn(p, theta, k))
    })
}

pub(crate) fn raw_obs_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> DMatrix<T> {
    model
        .obs_jacobian(x, theta, k)
        .unwrap_or_else(|| central_difference(x, model.obs_dim(), |p| model.obs_fn(p, theta, k)))
}

pub(crate) fn raw_state_param_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> DMatrix<T> {
    model.state_param_jacobian(x, theta, k).unwrap_or_else(|| {
        central_difference(theta, model.state_dim(), |p| model.state_fn(x, p, k))
    })
}

pub(crate) fn raw_obs_param_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> DMatrix<T> {
    model
        .obs_param_jacobian(x, theta, k)
        .unwrap_or_else(|| central_difference(theta, model.obs_dim(), |p| model.obs_fn(x, p, k)))
}

/// `df/dx`, supplied or by central differences.
pub fn eval_state_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    check_finite(raw_state_jacobian(model, x, theta, k), "state Jacobian", k)
}

/// `dh/dx`, supplied or by central differences.
pub fn eval_obs_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    check_finite(
        raw_obs_jacobian(model, x, theta, k),
        "observation Jacobian",
        k,
    )
}

/// `df/dθ`, supplied or by central differences.
pub fn eval_state_param_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    check_finite(
        raw_state_param_jacobian(model, x, theta, k),
        "state parameter Jacobian",
        k,
    )
}

/// `dh/dθ`, supplied or by central differences.
pub fn eval_obs_param_jacobian<T: Real, M: NonlinearModel<T> + ?Sized>(
    model: &M,
    x: &DVector<T>,
    theta: &DVector<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    check_finite(
        raw_obs_param_jacobian(model, x, theta, k),
        "observation parameter Jacobian",
        k,
    )
}

/// Time-invariant linear model with fixed `F`, `C`, `Q`, `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantLinearModel<T: Real> {
    pub f: DMatrix<T>,
    pub c: DMatrix<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
}

impl<T: Real> ConstantLinearModel<T> {
    pub fn new(f: DMatrix<T>, c: DMatrix<T>, q: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        let n = f.nrows();
        let p = c.nrows();
        let shape = |m: &DMatrix<T>| format!("{}x{}", m.nrows(), m.ncols());
        if f.ncols() != n {
            return Err(EstimationError::dim("F", format!("{n}x{n}"), shape(&f)));
        }
        if c.ncols() != n {
            return Err(EstimationError::dim("C", format!("{p}x{n}"), shape(&c)));
        }
        if q.shape() != (n, n) {
            return Err(EstimationError::dim("Q", format!("{n}x{n}"), shape(&q)));
        }
        if r.shape() != (p, p) {
            return Err(EstimationError::dim("R", format!("{p}x{p}"), shape(&r)));
        }
        Ok(Self { f, c, q, r })
    }
}

impl<T: Real> LinearModel<T> for ConstantLinearModel<T> {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
    fn transition(&self, _k: usize, _theta: &DVector<T>) -> DMatrix<T> {
        self.f.clone()
    }
    fn observation(&self, _k: usize, _theta: &DVector<T>) -> DMatrix<T> {
        self.c.clone()
    }
    fn process_noise(&self, _k: usize) -> DMatrix<T> {
        self.q.clone()
    }
    fn obs_noise(&self, _k: usize) -> DMatrix<T> {
        self.r.clone()
    }
}

/// Views a linear model as a nonlinear one: `f = F x`, `h = C x`, exact Jacobians.
#[derive(Debug, Clone)]
pub struct LinearAsNonlinear<M>(pub M);

impl<T: Real, M: LinearModel<T>> NonlinearModel<T> for LinearAsNonlinear<M> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.0.obs_dim()
    }
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }
    fn state_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T> {
        self.0.transition(k, theta) * x
    }
    fn obs_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T> {
        self.0.observation(k, theta) * x
    }
    fn process_noise(&self, k: usize) -> DMatrix<T> {
        self.0.process_noise(k)
    }
    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        self.0.obs_noise(k)
    }
    fn state_jacobian(&self, _x: &DVector<T>, theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        Some(self.0.transition(k, theta))
    }
    fn obs_jacobian(&self, _x: &DVector<T>, theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        Some(self.0.observation(k, theta))
    }
}
