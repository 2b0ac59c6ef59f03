//! GUM Monte Carlo propagation through a Kalman-filter measurement model.
//!
//! Each trial `m` carries a joint sample `(x⁽ᵐ⁾, θ⁽ᵐ⁾)` together with its own
//! deterministic covariance recursion `P⁽ᵐ⁾`, from which the trial's gain is
//! computed. One step of a trial is
//!
//! ```text
//! x_pred, P_pred = predict(x(k-1), θ)
//! x̃             = x_pred + z,         z ~ N(0, Q(k))
//! x(k)           = correct(x̃, P_pred, y, θ),  y ~ N(ŷ(k), R(k))
//! ```
//!
//! The sequential form ([`mc_step`], [`mc_sequential`]) keeps one live
//! ensemble and reduces it to statistics at every `k`; the batch form
//! ([`mc_batch`]) runs whole trajectories trial by trial. Both draw from the
//! same `(m, k, label)` substreams and are therefore bit-identical.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::belief::{GaussianBelief, ParameterKnowledge};
use crate::covariance::gate;
use crate::error::{EstimationError, Result};
use crate::kalman::{joseph_update, kf_gain};
use crate::model::{eval_obs_jacobian, eval_state_jacobian, LinearModel, NonlinearModel};
use crate::rng::{MvnSampler, RngStreamPlan, StreamLabel};
use crate::scalar::Real;

/// The Kalman-type filter a trial runs (the `Kalman_predict` /
/// `Kalman_correct` pair of the measurement model).
pub trait TrialFilter<T: Real>: Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn process_noise(&self, k: usize) -> DMatrix<T>;
    fn obs_noise(&self, k: usize) -> DMatrix<T>;

    /// Returns `(x_{k,k-1}, P_{k,k-1})`.
    fn predict(
        &self,
        x: &DVector<T>,
        cov: &DMatrix<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Result<(DVector<T>, DMatrix<T>)>;

    /// Corrects the perturbed prediction `x_tilde` with measurement `y`.
    /// Gains are evaluated at the unperturbed prediction `x_pred`.
    fn correct(
        &self,
        x_tilde: &DVector<T>,
        x_pred: &DVector<T>,
        p_pred: &DMatrix<T>,
        y: &DVector<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Result<(DVector<T>, DMatrix<T>)>;
}

/// Linear Kalman filter with parameter-dependent `F(θ,k)`, `C(θ,k)`.
#[derive(Debug, Clone)]
pub struct LinearKf<M>(pub M);

impl<T: Real, M: LinearModel<T>> TrialFilter<T> for LinearKf<M> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.0.obs_dim()
    }
    fn process_noise(&self, k: usize) -> DMatrix<T> {
        self.0.process_noise(k)
    }
    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        self.0.obs_noise(k)
    }

    fn predict(
        &self,
        x: &DVector<T>,
        cov: &DMatrix<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Result<(DVector<T>, DMatrix<T>)> {
        let f = self.0.transition(k, theta);
        let p = gate(&f * cov * f.transpose() + self.0.process_noise(k))?;
        Ok((&f * x, p))
    }

    fn correct(
        &self,
        x_tilde: &DVector<T>,
        _x_pred: &DVector<T>,
        p_pred: &DMatrix<T>,
        y: &DVector<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Result<(DVector<T>, DMatrix<T>)> {
        let c = self.0.observation(k, theta);
        let r = self.0.obs_noise(k);
        let gain = kf_gain(p_pred, &c, &r, k)?;
        let x = x_tilde + &gain * (y - &c * x_tilde);
        Ok((x, gate(joseph_update(p_pred, &gain, &c, &r))?))
    }
}

/// Extended Kalman filter; use with an augmented model to carry `θ` in the state.
#[derive(Debug, Clone)]
pub struct ExtendedKf<M>(pub M);

impl<T: Real, M: NonlinearModel<T>> TrialFilter<T> for ExtendedKf<M> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.0.obs_dim()
    }
    fn process_noise(&self, k: usize) -> DMatrix<T> {
        self.0.process_noise(k)
    }
    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        self.0.obs_noise(k)
    }

    fn predict(
        &self,
        x: &DVector<T>,
        cov: &DMatrix<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Result<(DVector<T>, DMatrix<T>)> {
        let f = eval_state_jacobian(&self.0, x, theta, k)?;
        let p = gate(&f * cov * f.transpose() + self.0.process_noise(k))?;
        Ok((self.0.state_fn(x, theta, k), p))
    }

    fn correct(
        &self,
        x_tilde: &DVector<T>,
        x_pred: &DVector<T>,
        p_pred: &DMatrix<T>,
        y: &DVector<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Result<(DVector<T>, DMatrix<T>)> {
        let h = eval_obs_jacobian(&self.0, x_pred, theta, k)?;
        let r = self.0.obs_noise(k);
        let gain = kf_gain(p_pred, &h, &r, k)?;
        let x = x_tilde + &gain * (y - self.0.obs_fn(x_tilde, theta, k));
        Ok((x, gate(joseph_update(p_pred, &gain, &h, &r))?))
    }
}

/// One Monte Carlo trial: the joint sample and its covariance recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial<T: Real> {
    pub state: DVector<T>,
    pub param: DVector<T>,
    /// The trial's deterministic `P(k)`.
    pub cov: DMatrix<T>,
}

/// `M` joint samples `(x⁽ᵐ⁾(k), θ⁽ᵐ⁾)` at time index `k`.
///
/// Trials are only ever advanced as a whole, so a state is never paired
/// with another trial's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct McEnsemble<T: Real> {
    trials: Vec<Trial<T>>,
    k: usize,
}

impl<T: Real> McEnsemble<T> {
    pub fn from_trials(trials: Vec<Trial<T>>, k: usize) -> Result<Self> {
        for (m, t) in trials.iter().enumerate() {
            if t.state.iter().chain(t.param.iter()).any(|v| !v.is_finite()) {
                return Err(EstimationError::NonFinite {
                    what: "trial sample",
                    k,
                    index: Some(m),
                });
            }
        }
        Ok(Self { trials, k })
    }

    pub fn trials(&self) -> &[Trial<T>] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn states(&self) -> impl Iterator<Item = &DVector<T>> {
        self.trials.iter().map(|t| &t.state)
    }

    pub fn params(&self) -> impl Iterator<Item = &DVector<T>> {
        self.trials.iter().map(|t| &t.param)
    }
}

/// How trials are scheduled and how statistics are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Trials in order on the calling thread; statistics reduced in trial order.
    #[default]
    Serial,
    /// Trials on the rayon pool. Trial states are unaffected; moment
    /// reduction uses a parallel tree and is only permutation-tolerant.
    Parallel,
}

fn kahan_add<T: Real>(sum: &mut T, comp: &mut T, value: T) {
    let y = value - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// Streaming mean and covariance (Welford updates with Kahan-compensated
/// accumulators).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments<T: Real> {
    count: usize,
    mean: DVector<T>,
    mean_comp: DVector<T>,
    m2: DMatrix<T>,
    m2_comp: DMatrix<T>,
}

impl<T: Real> RunningMoments<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            mean_comp: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            m2_comp: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &DVector<T>) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = T::from_usize(self.count).expect("count fits the scalar type");
        let delta = x - &self.mean;
        for i in 0..self.dim() {
            kahan_add(&mut self.mean[i], &mut self.mean_comp[i], delta[i] / n);
        }
        let delta2 = x - &self.mean;
        for j in 0..self.dim() {
            for i in 0..self.dim() {
                kahan_add(
                    &mut self.m2[(i, j)],
                    &mut self.m2_comp[(i, j)],
                    delta[i] * delta2[j],
                );
            }
        }
    }

    /// Combines two partial accumulations (pairwise update).
    pub fn merge(mut self, other: &Self) -> Self {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other.clone();
        }
        let na = T::from_usize(self.count).expect("count fits the scalar type");
        let nb = T::from_usize(other.count).expect("count fits the scalar type");
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.m2 += &other.m2 + &delta * delta.transpose() * (na * nb / n);
        self.count += other.count;
        self.mean_comp.fill(T::zero());
        self.m2_comp.fill(T::zero());
        self.m2 = crate::covariance::symmetrize(&self.m2).expect("square accumulator");
        self
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    /// Unbiased covariance, divisor `count - 1`.
    pub fn covariance(&self) -> Result<DMatrix<T>> {
        if self.count < 2 {
            return Err(EstimationError::InsufficientSamples {
                needed: 2,
                got: self.count,
            });
        }
        let d = T::from_usize(self.count - 1).expect("count fits the scalar type");
        let m2 = crate::covariance::symmetrize(&self.m2)?;
        Ok(m2 / d)
    }
}

/// Statistics of an ensemble at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary<T: Real> {
    pub k: usize,
    pub trials: usize,
    /// Mean and unbiased covariance of the states.
    pub state: GaussianBelief<T>,
    /// Per-coordinate nearest-rank quantiles `(probability, values)`.
    pub quantiles: Vec<(T, DVector<T>)>,
    /// Mean and covariance of the parameter samples (empty when there are none).
    pub param: GaussianBelief<T>,
}

/// Nearest-rank quantile of sorted data: the value at rank `ceil(p·M)`.
pub fn nearest_rank<T: Real>(sorted: &[T], p: T) -> T {
    let m = sorted.len();
    let rank = (p * T::from_usize(m).expect("length fits")).ceil();
    let rank = rank.to_usize().unwrap_or(1).clamp(1, m);
    sorted[rank - 1]
}

fn moments_of<'a, T: Real>(
    dim: usize,
    samples: impl Iterator<Item = &'a DVector<T>>,
) -> RunningMoments<T> {
    let mut acc = RunningMoments::new(dim);
    for s in samples {
        acc.push(s);
    }
    acc
}

fn belief_from<T: Real>(acc: &RunningMoments<T>) -> Result<GaussianBelief<T>> {
    Ok(GaussianBelief::from_checked(
        acc.mean().clone(),
        gate(acc.covariance()?)?,
    ))
}

fn marginal_quantiles<T: Real>(
    ensemble: &McEnsemble<T>,
    probabilities: &[T],
) -> Vec<(T, DVector<T>)> {
    let n = ensemble.trials.first().map_or(0, |t| t.state.len());
    let mut columns: Vec<Vec<T>> = (0..n)
        .map(|i| ensemble.trials.iter().map(|t| t.state[i]).collect())
        .collect();
    for c in &mut columns {
        c.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    }
    probabilities
        .iter()
        .map(|&p| {
            (
                p,
                DVector::from_iterator(n, columns.iter().map(|c| nearest_rank(c, p))),
            )
        })
        .collect()
}

/// Mean, unbiased covariance and marginal quantiles of an ensemble.
pub fn finalize_stats<T: Real>(
    ensemble: &McEnsemble<T>,
    probabilities: &[T],
) -> Result<EnsembleSummary<T>> {
    finalize_with(ensemble, probabilities, Execution::Serial)
}

fn finalize_with<T: Real>(
    ensemble: &McEnsemble<T>,
    probabilities: &[T],
    exec: Execution,
) -> Result<EnsembleSummary<T>> {
    let m = ensemble.len();
    if m < 2 {
        return Err(EstimationError::InsufficientSamples { needed: 2, got: m });
    }
    let n = ensemble.trials[0].state.len();
    let nt = ensemble.trials[0].param.len();
    let (states, params) = match exec {
        Execution::Serial => (
            moments_of(n, ensemble.states()),
            moments_of(nt, ensemble.params()),
        ),
        Execution::Parallel => {
            let reduce = |dim: usize, pick: fn(&Trial<T>) -> &DVector<T>| {
                ensemble
                    .trials
                    .par_chunks(1024)
                    .map(|chunk| moments_of(dim, chunk.iter().map(pick)))
                    .reduce(|| RunningMoments::new(dim), |a, b| a.merge(&b))
            };
            (reduce(n, |t| &t.state), reduce(nt, |t| &t.param))
        }
    };
    Ok(EnsembleSummary {
        k: ensemble.k,
        trials: m,
        state: belief_from(&states)?,
        quantiles: marginal_quantiles(ensemble, probabilities),
        param: belief_from(&params)?,
    })
}

/// Draws the initial ensemble: `x⁽ᵐ⁾(0) ~ N(x̂(0), P(0))` and
/// `θ⁽ᵐ⁾ ~ N(θ̂, U_θ)` from substreams `(m, 0, ·)`; every trial starts its
/// covariance recursion at `P(0)`.
pub fn mc_init<T: Real>(
    prior: &GaussianBelief<T>,
    theta: &ParameterKnowledge<T>,
    plan: &RngStreamPlan,
    trials: usize,
) -> Result<McEnsemble<T>> {
    let xs = MvnSampler::new(prior.mean().clone(), prior.cov())?;
    let ts = MvnSampler::new(theta.estimate().clone(), theta.cov())?;
    let trials = (0..trials)
        .map(|m| Trial {
            state: xs.sample(&mut plan.substream(m as u64, 0, StreamLabel::Prior)),
            param: ts.sample(&mut plan.substream(m as u64, 0, StreamLabel::Parameter)),
            cov: prior.cov().clone(),
        })
        .collect();
    McEnsemble::from_trials(trials, 0)
}

/// Input-quantity samplers for one time index.
struct StepInputs<T: Real> {
    k: usize,
    y: MvnSampler<T>,
    z: MvnSampler<T>,
}

impl<T: Real> StepInputs<T> {
    fn new<F: TrialFilter<T> + ?Sized>(filter: &F, y_hat: &DVector<T>, k: usize) -> Result<Self> {
        if y_hat.len() != filter.obs_dim() {
            return Err(EstimationError::dim(
                "measurement",
                filter.obs_dim(),
                y_hat.len(),
            ));
        }
        Ok(Self {
            k,
            y: MvnSampler::new(y_hat.clone(), &filter.obs_noise(k))?,
            z: MvnSampler::centered(&filter.process_noise(k))?,
        })
    }
}

fn advance_trial<T: Real, F: TrialFilter<T> + ?Sized>(
    trial: &Trial<T>,
    m: usize,
    inputs: &StepInputs<T>,
    filter: &F,
    plan: &RngStreamPlan,
) -> Result<Trial<T>> {
    let k = inputs.k;
    let y = inputs
        .y
        .sample(&mut plan.substream(m as u64, k as u64, StreamLabel::Measurement));
    let z = inputs
        .z
        .sample(&mut plan.substream(m as u64, k as u64, StreamLabel::ProcessNoise));
    let with_index = |e: EstimationError| match e {
        EstimationError::NonFinite { what, k, .. } => EstimationError::NonFinite {
            what,
            k,
            index: Some(m),
        },
        other => other,
    };
    let (x_pred, p_pred) = filter
        .predict(&trial.state, &trial.cov, &trial.param, k)
        .map_err(with_index)?;
    let x_tilde = &x_pred + z;
    let (state, cov) = filter
        .correct(&x_tilde, &x_pred, &p_pred, &y, &trial.param, k)
        .map_err(with_index)?;
    if state.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::NonFinite {
            what: "trial state",
            k,
            index: Some(m),
        });
    }
    Ok(Trial {
        state,
        param: trial.param.clone(),
        cov,
    })
}

/// Advances every trial from `k - 1` to `k`, with `y⁽ᵐ⁾ ~ N(ŷ(k), R(k))`
/// and `z⁽ᵐ⁾ ~ N(0, Q(k))` drawn from substreams `(m, k, ·)`.
pub fn mc_step<T: Real, F: TrialFilter<T> + ?Sized>(
    ensemble: &McEnsemble<T>,
    y_hat: &DVector<T>,
    filter: &F,
    plan: &RngStreamPlan,
    k: usize,
    exec: Execution,
) -> Result<McEnsemble<T>> {
    if k != ensemble.k + 1 {
        return Err(EstimationError::Config(format!(
            "ensemble is at k = {}, cannot step to k = {k}",
            ensemble.k
        )));
    }
    let inputs = StepInputs::new(filter, y_hat, k)?;
    let trials = match exec {
        Execution::Serial => ensemble
            .trials
            .iter()
            .enumerate()
            .map(|(m, t)| advance_trial(t, m, &inputs, filter, plan))
            .collect::<Result<Vec<_>>>()?,
        Execution::Parallel => ensemble
            .trials
            .par_iter()
            .enumerate()
            .map(|(m, t)| advance_trial(t, m, &inputs, filter, plan))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(McEnsemble { trials, k })
}

/// Settings shared by the sequential and batch drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig<T: Real> {
    pub trials: usize,
    pub execution: Execution,
    /// Probabilities of the marginal quantiles reported at each `k`.
    pub quantiles: Vec<T>,
}

impl<T: Real> McConfig<T> {
    pub fn new(trials: usize) -> Self {
        Self {
            trials,
            execution: Execution::Serial,
            quantiles: vec![T::lit(0.025), T::lit(0.5), T::lit(0.975)],
        }
    }
}

fn check_run<T: Real>(measurements: &[DVector<T>], cfg: &McConfig<T>) -> Result<()> {
    if measurements.is_empty() {
        return Err(EstimationError::Config(
            "need at least one measurement".into(),
        ));
    }
    if cfg.trials < 2 {
        return Err(EstimationError::InsufficientSamples {
            needed: 2,
            got: cfg.trials,
        });
    }
    Ok(())
}

/// Sequential GUM Monte Carlo over `measurements` (`ŷ(1), ŷ(2), ...`).
///
/// Only the current ensemble is alive; `sink` receives the summary for
/// `k = 0..=N` and the ensemble it was computed from, which is then dropped.
pub fn mc_sequential<T, F, S>(
    filter: &F,
    prior: &GaussianBelief<T>,
    theta: &ParameterKnowledge<T>,
    measurements: &[DVector<T>],
    plan: &RngStreamPlan,
    cfg: &McConfig<T>,
    mut sink: S,
) -> Result<()>
where
    T: Real,
    F: TrialFilter<T> + ?Sized,
    S: FnMut(&EnsembleSummary<T>, &McEnsemble<T>),
{
    check_run(measurements, cfg)?;
    let mut ensemble = mc_init(prior, theta, plan, cfg.trials)?;
    sink(
        &finalize_with(&ensemble, &cfg.quantiles, cfg.execution)?,
        &ensemble,
    );
    for (i, y_hat) in measurements.iter().enumerate() {
        ensemble = mc_step(&ensemble, y_hat, filter, plan, i + 1, cfg.execution)?;
        sink(
            &finalize_with(&ensemble, &cfg.quantiles, cfg.execution)?,
            &ensemble,
        );
    }
    Ok(())
}

/// What [`mc_batch`] keeps besides the per-`k` statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStore {
    /// Statistics only; evaluated time-major with one live ensemble.
    StatisticsOnly,
    /// Every trial trajectory, provided it fits `budget_bytes`.
    Full { budget_bytes: usize },
}

/// Output of [`mc_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<T: Real> {
    /// Summaries for `k = 0..=N`.
    pub summaries: Vec<EnsembleSummary<T>>,
    /// Ensembles for `k = 0..=N` when the full store was requested.
    pub ensembles: Option<Vec<McEnsemble<T>>>,
}

/// Bytes needed to hold every trial sample for `k = 0..=N`.
pub fn full_store_bytes<T: Real>(
    steps: usize,
    trials: usize,
    state_dim: usize,
    param_dim: usize,
) -> usize {
    let per_trial = (state_dim + param_dim + state_dim * state_dim) * std::mem::size_of::<T>();
    (steps + 1).saturating_mul(trials).saturating_mul(per_trial)
}

/// Batch GUM Monte Carlo: the measurand is the whole trajectory.
///
/// With [`SampleStore::Full`] every trial runs its whole trajectory before
/// the next trial starts, and all samples are kept. The draws come from the
/// same substreams as [`mc_step`], so every stored state is bit-identical to
/// the sequential evaluation.
pub fn mc_batch<T, F>(
    filter: &F,
    prior: &GaussianBelief<T>,
    theta: &ParameterKnowledge<T>,
    measurements: &[DVector<T>],
    plan: &RngStreamPlan,
    cfg: &McConfig<T>,
    store: SampleStore,
) -> Result<BatchOutput<T>>
where
    T: Real,
    F: TrialFilter<T> + ?Sized,
{
    check_run(measurements, cfg)?;
    let budget = match store {
        SampleStore::StatisticsOnly => {
            let mut summaries = Vec::with_capacity(measurements.len() + 1);
            mc_sequential(filter, prior, theta, measurements, plan, cfg, |s, _| {
                summaries.push(s.clone())
            })?;
            return Ok(BatchOutput {
                summaries,
                ensembles: None,
            });
        }
        SampleStore::Full { budget_bytes } => budget_bytes,
    };
    let requested = full_store_bytes::<T>(
        measurements.len(),
        cfg.trials,
        filter.state_dim(),
        theta.dim(),
    );
    if requested > budget {
        return Err(EstimationError::Capacity { requested, budget });
    }

    let initial = mc_init(prior, theta, plan, cfg.trials)?;
    let inputs = measurements
        .iter()
        .enumerate()
        .map(|(i, y)| StepInputs::new(filter, y, i + 1))
        .collect::<Result<Vec<_>>>()?;

    // ESTIMATE_X(y, θ) for one trial
    let trajectory = |m: usize, start: &Trial<T>| -> Result<Vec<Trial<T>>> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(start.clone());
        for step in &inputs {
            let next = advance_trial(out.last().expect("non-empty"), m, step, filter, plan)?;
            out.push(next);
        }
        Ok(out)
    };
    let per_trial: Vec<Vec<Trial<T>>> = match cfg.execution {
        Execution::Serial => initial
            .trials
            .iter()
            .enumerate()
            .map(|(m, t)| trajectory(m, t))
            .collect::<Result<_>>()?,
        Execution::Parallel => initial
            .trials
            .par_iter()
            .enumerate()
            .map(|(m, t)| trajectory(m, t))
            .collect::<Result<_>>()?,
    };

    // trial-major -> time-major
    let steps = inputs.len() + 1;
    let mut by_time: Vec<Vec<Trial<T>>> =
        (0..steps).map(|_| Vec::with_capacity(cfg.trials)).collect();
    for traj in per_trial {
        for (k, t) in traj.into_iter().enumerate() {
            by_time[k].push(t);
        }
    }
    let ensembles: Vec<McEnsemble<T>> = by_time
        .into_iter()
        .enumerate()
        .map(|(k, trials)| McEnsemble { trials, k })
        .collect();
    let summaries = ensembles
        .iter()
        .map(|e| finalize_with(e, &cfg.quantiles, cfg.execution))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchOutput {
        summaries,
        ensembles: Some(ensembles),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::run_kalman;
    use crate::model::ConstantLinearModel;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn two_pass(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let n = samples.len() as f64;
        let dim = samples[0].len();
        let mut mean = DVector::zeros(dim);
        for s in samples {
            mean += s;
        }
        mean /= n;
        let mut cov = DMatrix::zeros(dim, dim);
        for s in samples {
            let d = s - &mean;
            cov += &d * d.transpose();
        }
        (mean, cov / (n - 1.0))
    }

    fn ensemble_of(xs: &[f64]) -> McEnsemble<f64> {
        let trials = xs
            .iter()
            .map(|&x| Trial {
                state: dvector![x],
                param: DVector::zeros(0),
                cov: dmatrix![0.0],
            })
            .collect();
        McEnsemble::from_trials(trials, 0).unwrap()
    }

    #[test]
    fn two_sample_statistics() {
        let s = finalize_stats(&ensemble_of(&[0.0, 2.0]), &[0.5]).unwrap();
        assert_eq!(s.state.mean()[0], 1.0);
        assert_eq!(s.state.cov()[(0, 0)], 2.0);
    }

    #[test]
    fn identical_samples_have_zero_covariance() {
        let s = finalize_stats(&ensemble_of(&[3.5; 10]), &[]).unwrap();
        assert_eq!(s.state.cov()[(0, 0)], 0.0);
    }

    #[test]
    fn single_sample_is_rejected() {
        assert_eq!(
            finalize_stats(&ensemble_of(&[1.0]), &[]).unwrap_err(),
            EstimationError::InsufficientSamples { needed: 2, got: 1 }
        );
    }

    #[test]
    fn standard_normal_quantiles() {
        let plan = RngStreamPlan::new(5);
        let mut rng = plan.substream(0, 0, StreamLabel::Prior);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| f64::standard_normal(&mut rng))
            .collect();
        let s = finalize_stats(&ensemble_of(&xs), &[0.025, 0.975]).unwrap();
        assert!((s.quantiles[0].1[0] + 1.96).abs() < 0.02);
        assert!((s.quantiles[1].1[0] - 1.96).abs() < 0.02);
    }

    #[test]
    fn nearest_rank_definition() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&v, 0.25), 1.0);
        assert_eq!(nearest_rank(&v, 0.26), 2.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&v, 1.0), 4.0);
    }

    proptest! {
        #[test]
        fn running_moments_match_two_pass(v in prop::collection::vec(-1e3f64..1e3, 6..60)) {
            let samples: Vec<DVector<f64>> = v.chunks_exact(2).map(|c| dvector![c[0], c[1] * 0.5 + 7.0]).collect();
            prop_assume!(samples.len() >= 3);
            let mut acc = RunningMoments::new(2);
            for s in &samples { acc.push(s); }
            let (mean, cov) = two_pass(&samples);
            let scale = cov.norm().max(1e-300);
            prop_assert!((acc.mean() - &mean).norm() <= 1e-10 * mean.norm().max(1.0));
            prop_assert!((acc.covariance().unwrap() - &cov).norm() <= 1e-10 * scale);
        }

        #[test]
        fn merge_matches_sequential_push(v in prop::collection::vec(-50.0f64..50.0, 8..80), split in 1usize..3) {
            let samples: Vec<DVector<f64>> = v.chunks_exact(2).map(|c| dvector![c[0], c[1]]).collect();
            prop_assume!(samples.len() >= 4);
            let cut = samples.len() * split / 4;
            let mut a = RunningMoments::new(2);
            let mut b = RunningMoments::new(2);
            let mut all = RunningMoments::new(2);
            for (i, s) in samples.iter().enumerate() {
                if i < cut { a.push(s) } else { b.push(s) }
                all.push(s);
            }
            let merged = a.merge(&b);
            prop_assert_eq!(merged.count(), all.count());
            prop_assert!((merged.mean() - all.mean()).norm() <= 1e-10 * all.mean().norm().max(1.0));
            let c = all.covariance().unwrap();
            prop_assert!((merged.covariance().unwrap() - &c).norm() <= 1e-10 * c.norm().max(1.0));
        }
    }

    fn zero_noise_model() -> ConstantLinearModel<f64> {
        ConstantLinearModel::new(
            dmatrix![1.0, 0.1; 0.0, 1.0],
            dmatrix![1.0, 0.0],
            DMatrix::zeros(2, 2),
            dmatrix![0.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_single_trial_follows_kalman_mean() {
        // R = 0 makes the gain singular; use a tiny R in the filter and zero draws.
        let model = ConstantLinearModel::new(
            dmatrix![1.0, 0.1; 0.0, 1.0],
            dmatrix![1.0, 0.0],
            DMatrix::zeros(2, 2),
            dmatrix![0.5],
        )
        .unwrap();
        let prior = GaussianBelief::new(dvector![1.0, 0.2], dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        let ys: Vec<DVector<f64>> = (1..=5).map(|k| dvector![1.0 + 0.03 * k as f64]).collect();

        // deterministic KF
        let kf = run_kalman(&prior, &ys, &model, &DVector::zeros(0)).unwrap();

        // M = 1 with every input covariance zero: a filter whose noise
        // covariances vanish for sampling but not for the gain
        struct Quiet<'a>(&'a ConstantLinearModel<f64>);
        impl TrialFilter<f64> for Quiet<'_> {
            fn state_dim(&self) -> usize {
                2
            }
            fn obs_dim(&self) -> usize {
                1
            }
            fn process_noise(&self, _k: usize) -> DMatrix<f64> {
                DMatrix::zeros(2, 2)
            }
            fn obs_noise(&self, _k: usize) -> DMatrix<f64> {
                DMatrix::zeros(1, 1)
            }
            fn predict(
                &self,
                x: &DVector<f64>,
                cov: &DMatrix<f64>,
                th: &DVector<f64>,
                k: usize,
            ) -> Result<(DVector<f64>, DMatrix<f64>)> {
                LinearKf(self.0).predict(x, cov, th, k)
            }
            fn correct(
                &self,
                xt: &DVector<f64>,
                xp: &DVector<f64>,
                pp: &DMatrix<f64>,
                y: &DVector<f64>,
                th: &DVector<f64>,
                k: usize,
            ) -> Result<(DVector<f64>, DMatrix<f64>)> {
                LinearKf(self.0).correct(xt, xp, pp, y, th, k)
            }
        }
        let plan = RngStreamPlan::new(9);
        let start = McEnsemble::from_trials(
            vec![Trial {
                state: prior.mean().clone(),
                param: DVector::zeros(0),
                cov: prior.cov().clone(),
            }],
            0,
        )
        .unwrap();
        let mut e = start;
        for (i, y) in ys.iter().enumerate() {
            e = mc_step(&e, y, &Quiet(&model), &plan, i + 1, Execution::Serial).unwrap();
            let t = &e.trials()[0];
            assert!((&t.state - kf[i].corrected.mean()).norm() < 1e-14);
            assert!((&t.cov - kf[i].corrected.cov()).norm() < 1e-14);
        }
        let _ = zero_noise_model();
    }

    #[test]
    fn step_must_follow_ensemble_time() {
        let model = LinearKf(zero_noise_model());
        let e = ensemble_of(&[1.0, 2.0]);
        let plan = RngStreamPlan::new(1);
        assert!(matches!(
            mc_step(&e, &dvector![0.0], &model, &plan, 5, Execution::Serial),
            Err(EstimationError::Config(_))
        ));
    }

    #[test]
    fn full_store_respects_budget() {
        let model = LinearKf(
            ConstantLinearModel::new(dmatrix![1.0], dmatrix![1.0], dmatrix![0.1], dmatrix![1.0])
                .unwrap(),
        );
        let prior = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let ys = vec![dvector![0.1]; 10];
        let plan = RngStreamPlan::new(2);
        let cfg = McConfig::new(100);
        let need = full_store_bytes::<f64>(10, 100, 1, 0);
        let err = mc_batch(
            &model,
            &prior,
            &ParameterKnowledge::none(),
            &ys,
            &plan,
            &cfg,
            SampleStore::Full {
                budget_bytes: need - 1,
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            EstimationError::Capacity {
                requested: need,
                budget: need - 1
            }
        );
        assert!(mc_batch(
            &model,
            &prior,
            &ParameterKnowledge::none(),
            &ys,
            &plan,
            &cfg,
            SampleStore::Full { budget_bytes: need },
        )
        .is_ok());
    }

    #[test]
    fn single_step_batch_equals_one_mc_step() {
        let model = LinearKf(
            ConstantLinearModel::new(dmatrix![0.9], dmatrix![1.0], dmatrix![0.1], dmatrix![1.0])
                .unwrap(),
        );
        let prior = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let ys = vec![dvector![0.4]];
        let plan = RngStreamPlan::new(3);
        let cfg = McConfig::new(50);
        let out = mc_batch(
            &model,
            &prior,
            &ParameterKnowledge::none(),
            &ys,
            &plan,
            &cfg,
            SampleStore::Full {
                budget_bytes: usize::MAX,
            },
        )
        .unwrap();
        let e0 = mc_init(&prior, &ParameterKnowledge::none(), &plan, 50).unwrap();
        let e1 = mc_step(&e0, &ys[0], &model, &plan, 1, Execution::Serial).unwrap();
        assert_eq!(out.ensembles.unwrap()[1], e1);
    }

    #[test]
    fn non_finite_trial_names_trial_and_time() {
        let model = LinearKf(
            ConstantLinearModel::new(
                dmatrix![f64::INFINITY],
                dmatrix![1.0],
                dmatrix![0.0],
                dmatrix![1.0],
            )
            .unwrap(),
        );
        let e = ensemble_of(&[0.0, 1.0]);
        let plan = RngStreamPlan::new(4);
        let err = mc_step(&e, &dvector![0.0], &model, &plan, 1, Execution::Serial).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }
}
