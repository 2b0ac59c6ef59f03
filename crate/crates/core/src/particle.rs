//! Bootstrap particle filter with likelihood weighting and ESS-triggered
//! multinomial resampling.
//!
//! Each step runs propagate, weight, ESS, resample. Summaries and
//! histograms at `k` are taken from the weighted set before resampling.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::belief::GaussianBelief;
use crate::covariance::gate;
use crate::error::{EstimationError, Result};
use crate::gum_mc::Execution;
use crate::model::NonlinearModel;
use crate::rng::{MvnSampler, RngStreamPlan, StreamLabel};
use crate::scalar::Real;

/// Tolerance on `|Σw - 1|`.
pub fn weight_tolerance<T: Real>() -> T {
    T::lit(1e-12).max(T::eps() * T::lit(16.0))
}

/// Weighted particles `{(x⁽ᵐ⁾(k), w⁽ᵐ⁾(k))}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<T: Real> {
    states: Vec<DVector<T>>,
    weights: Vec<T>,
    k: usize,
}

fn compensated_sum<T: Real>(values: impl Iterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

impl<T: Real> ParticleSet<T> {
    /// Checks finiteness and non-negativity, then normalizes the weights.
    pub fn new(states: Vec<DVector<T>>, weights: Vec<T>, k: usize) -> Result<Self> {
        if states.len() != weights.len() {
            return Err(EstimationError::dim(
                "particle weights",
                states.len(),
                weights.len(),
            ));
        }
        if states.is_empty() {
            return Err(EstimationError::InsufficientSamples { needed: 1, got: 0 });
        }
        let n = states[0].len();
        for (m, s) in states.iter().enumerate() {
            if s.len() != n {
                return Err(EstimationError::dim("particle state", n, s.len()));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(EstimationError::NonFinite {
                    what: "particle state",
                    k,
                    index: Some(m),
                });
            }
        }
        if let Some(m) = weights
            .iter()
            .position(|w| !w.is_finite() || *w < T::zero())
        {
            return Err(EstimationError::WeightDegeneracy {
                k,
                detail: format!("weight {m} is negative or non-finite"),
            });
        }
        let total = compensated_sum(weights.iter().copied());
        if total <= T::zero() {
            return Err(EstimationError::WeightDegeneracy {
                k,
                detail: "all weights are zero".into(),
            });
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { states, weights, k })
    }

    /// Equally weighted particles.
    pub fn uniform(states: Vec<DVector<T>>, k: usize) -> Result<Self> {
        let w = vec![T::one(); states.len()];
        Self::new(states, w, k)
    }

    pub fn states(&self) -> &[DVector<T>] {
        &self.states
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    /// Weighted mean and covariance `Σ w (x - x̄)(x - x̄)ᵀ`.
    pub fn weighted_belief(&self) -> Result<GaussianBelief<T>> {
        let n = self.state_dim();
        let mut mean = DVector::zeros(n);
        for (x, &w) in self.states.iter().zip(&self.weights) {
            mean.axpy(w, x, T::one());
        }
        let mut cov = DMatrix::zeros(n, n);
        for (x, &w) in self.states.iter().zip(&self.weights) {
            let d = x - &mean;
            cov.ger(w, &d, &d, T::one());
        }
        Ok(GaussianBelief::from_checked(mean, gate(cov)?))
    }
}

/// Draws `x⁽ᵐ⁾(0) ~ N(prior)` from substreams `(m, 0, Prior)`, equally weighted.
pub fn pf_init<T: Real>(
    prior: &GaussianBelief<T>,
    particles: usize,
    plan: &RngStreamPlan,
) -> Result<ParticleSet<T>> {
    if particles < 2 {
        return Err(EstimationError::InsufficientSamples {
            needed: 2,
            got: particles,
        });
    }
    let sampler = MvnSampler::new(prior.mean().clone(), prior.cov())?;
    let states = (0..particles)
        .map(|m| sampler.sample(&mut plan.substream(m as u64, 0, StreamLabel::Prior)))
        .collect();
    ParticleSet::uniform(states, 0)
}

/// Moves every particle from `k - 1` to `k`: `x⁽ᵐ⁾ = f(x⁽ᵐ⁾, θ, k) + η`,
/// `η ~ N(0, Q(k))` from substream `(m, k, ProcessNoise)`. Weights are kept.
pub fn pf_propagate<T: Real, M: NonlinearModel<T> + ?Sized>(
    particles: &ParticleSet<T>,
    model: &M,
    theta: &DVector<T>,
    plan: &RngStreamPlan,
    k: usize,
    exec: Execution,
) -> Result<ParticleSet<T>> {
    if particles.state_dim() != model.state_dim() {
        return Err(EstimationError::dim(
            "pf_propagate state",
            model.state_dim(),
            particles.state_dim(),
        ));
    }
    let noise = MvnSampler::centered(&model.process_noise(k))?;
    let step = |(m, x): (usize, &DVector<T>)| -> Result<DVector<T>> {
        let eta = noise.sample(&mut plan.substream(m as u64, k as u64, StreamLabel::ProcessNoise));
        let next = model.state_fn(x, theta, k) + eta;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(EstimationError::NonFinite {
                what: "particle state",
                k,
                index: Some(m),
            });
        }
        Ok(next)
    };
    let states = match exec {
        Execution::Serial => particles
            .states
            .iter()
            .enumerate()
            .map(step)
            .collect::<Result<Vec<_>>>()?,
        Execution::Parallel => particles
            .states
            .par_iter()
            .enumerate()
            .map(step)
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(ParticleSet {
        states,
        weights: particles.weights.clone(),
        k,
    })
}

/// Multiplies the weights by the Gaussian likelihood `N(ŷ; h(x⁽ᵐ⁾), R)` and
/// renormalizes, working with log-weights shifted by their maximum.
pub fn pf_weight<T: Real, M: NonlinearModel<T> + ?Sized>(
    particles: &ParticleSet<T>,
    y_hat: &DVector<T>,
    model: &M,
    theta: &DVector<T>,
) -> Result<ParticleSet<T>> {
    let mut out = particles.clone();
    reweight(&mut out, y_hat, model, theta)?;
    Ok(out)
}

fn reweight<T: Real, M: NonlinearModel<T> + ?Sized>(
    particles: &mut ParticleSet<T>,
    y_hat: &DVector<T>,
    model: &M,
    theta: &DVector<T>,
) -> Result<()> {
    let k = particles.k;
    let p = model.obs_dim();
    if y_hat.len() != p {
        return Err(EstimationError::dim(
            "pf_weight measurement",
            p,
            y_hat.len(),
        ));
    }
    let r = model.obs_noise(k);
    let r_inv = r
        .cholesky()
        .ok_or(EstimationError::SingularInnovation { k })?
        .inverse();
    let half = T::lit(0.5);
    // None marks a zero weight or an infinite misfit
    let log_w: Vec<Option<T>> = particles
        .states
        .iter()
        .zip(&particles.weights)
        .map(|(x, &w)| {
            if w == T::zero() {
                return None;
            }
            let d = y_hat - model.obs_fn(x, theta, k);
            let l = w.ln() - half * d.dot(&(&r_inv * &d));
            l.is_finite().then_some(l)
        })
        .collect();
    let Some(max) = log_w.iter().flatten().copied().reduce(|a, b| a.max(b)) else {
        return Err(EstimationError::WeightDegeneracy {
            k,
            detail: format!("all {} log-likelihoods are infinite", log_w.len()),
        });
    };
    let weights: Vec<T> = log_w
        .iter()
        .map(|l| l.map_or(T::zero(), |l| (l - max).exp()))
        .collect();
    let total = compensated_sum(weights.iter().copied());
    particles.weights = weights.into_iter().map(|w| w / total).collect();
    Ok(())
}

/// Effective sample size `1 / Σ w²`.
pub fn pf_ess<T: Real>(particles: &ParticleSet<T>) -> Result<T> {
    let sum = compensated_sum(particles.weights.iter().copied());
    if (sum - T::one()).abs() > weight_tolerance::<T>() {
        return Err(EstimationError::UnnormalizedWeights {
            sum: sum.to_f64_lossy(),
        });
    }
    let sq = compensated_sum(particles.weights.iter().map(|w| *w * *w));
    let n = T::from_usize(particles.len()).expect("count fits");
    Ok((T::one() / sq).max(T::one()).min(n))
}

/// Multinomial resampling when `ESS < γ N_s`, with uniforms from substream
/// `(0, k, Resample)`. Returns the new set and whether it was resampled.
pub fn pf_resample<T: Real>(
    particles: &ParticleSet<T>,
    gamma: T,
    plan: &RngStreamPlan,
) -> Result<(ParticleSet<T>, bool)> {
    resample_owned(particles.clone(), gamma, plan)
}

fn resample_owned<T: Real>(
    particles: ParticleSet<T>,
    gamma: T,
    plan: &RngStreamPlan,
) -> Result<(ParticleSet<T>, bool)> {
    if !(gamma > T::zero() && gamma <= T::one()) {
        return Err(EstimationError::Config(format!(
            "resampling tolerance must lie in (0, 1], got {}",
            gamma.to_f64_lossy()
        )));
    }
    let ess = pf_ess(&particles)?;
    let n = particles.len();
    if ess >= gamma * T::from_usize(n).expect("count fits") {
        return Ok((particles, false));
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = T::zero();
    for &w in &particles.weights {
        acc += w;
        cumulative.push(acc);
    }
    let last_positive = particles
        .weights
        .iter()
        .rposition(|w| *w > T::zero())
        .expect("normalized weights have a positive entry");
    let mut rng = plan.substream(0, particles.k as u64, StreamLabel::Resample);
    let states = (0..n)
        .map(|_| {
            let u = T::uniform01(&mut rng) * acc;
            let i = cumulative.partition_point(|c| *c <= u).min(last_positive);
            particles.states[i].clone()
        })
        .collect();
    let w = T::one() / T::from_usize(n).expect("count fits");
    Ok((
        ParticleSet {
            states,
            weights: vec![w; n],
            k: particles.k,
        },
        true,
    ))
}

/// Weighted quantile: smallest `x` whose cumulative weight reaches `p`.
pub fn weighted_quantile<T: Real>(sorted: &[(T, T)], p: T) -> T {
    let mut acc = T::zero();
    for &(x, w) in sorted {
        acc += w;
        if acc >= p {
            return x;
        }
    }
    sorted.last().map_or(T::zero(), |s| s.0)
}

/// Largest bin count a histogram may use.
pub const MAX_BINS: usize = 10_000;

/// Weighted marginal histogram of one state component.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram<T: Real> {
    pub component: usize,
    pub k: usize,
    /// `bins + 1` edges.
    pub edges: Vec<T>,
    /// Probability density per bin; integrates to one.
    pub density: Vec<T>,
    pub mean: T,
    pub std_dev: T,
}

impl<T: Real> Histogram<T> {
    pub fn bins(&self) -> usize {
        self.density.len()
    }
}

/// Freedman–Diaconis histogram of component `component`.
///
/// Bin width `2 IQR / n^{1/3}` from weighted quartiles, with `n` the
/// effective sample size; the range spans the particles of positive weight.
pub fn marginal_histogram<T: Real>(
    particles: &ParticleSet<T>,
    component: usize,
) -> Result<Histogram<T>> {
    if component >= particles.state_dim() {
        return Err(EstimationError::dim(
            "histogram component",
            format!("< {}", particles.state_dim()),
            component,
        ));
    }
    let mut pairs: Vec<(T, T)> = particles
        .states
        .iter()
        .zip(&particles.weights)
        .filter(|(_, w)| **w > T::zero())
        .map(|(x, w)| (x[component], *w))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite particles"));
    let lo = pairs[0].0;
    let hi = pairs[pairs.len() - 1].0;
    let mean = compensated_sum(pairs.iter().map(|(x, w)| *x * *w));
    let var = compensated_sum(pairs.iter().map(|(x, w)| (*x - mean) * (*x - mean) * *w));
    let ess = pf_ess(particles)?;
    let iqr = weighted_quantile(&pairs, T::lit(0.75)) - weighted_quantile(&pairs, T::lit(0.25));
    let width = T::lit(2.0) * iqr / ess.cbrt();
    let range = hi - lo;
    let bins = if range == T::zero() || width <= T::zero() {
        1
    } else {
        (range / width)
            .ceil()
            .to_usize()
            .unwrap_or(MAX_BINS)
            .clamp(1, MAX_BINS)
    };
    let (lo, hi) = if range == T::zero() {
        (lo - T::lit(0.5), hi + T::lit(0.5))
    } else {
        (lo, hi)
    };
    let nb = T::from_usize(bins).expect("bin count fits");
    let step = (hi - lo) / nb;
    let edges: Vec<T> = (0..=bins)
        .map(|i| lo + step * T::from_usize(i).expect("bin index fits"))
        .collect();
    let mut mass = vec![T::zero(); bins];
    for &(x, w) in &pairs {
        let i = ((x - lo) / step)
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(bins - 1);
        mass[i] += w;
    }
    let total = compensated_sum(mass.iter().copied());
    let density = mass.into_iter().map(|m| m / (total * step)).collect();
    Ok(Histogram {
        component,
        k: particles.k,
        edges,
        density,
        mean,
        std_dev: var.max(T::zero()).sqrt(),
    })
}

/// Settings for [`pf_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct PfConfig<T: Real> {
    pub particles: usize,
    /// Resampling tolerance `γ ∈ (0, 1]`.
    pub gamma: T,
    pub execution: Execution,
    /// `(component, k)` pairs for which a marginal histogram is recorded.
    pub histograms: Vec<(usize, usize)>,
}

impl<T: Real> PfConfig<T> {
    pub fn new(particles: usize, gamma: T) -> Self {
        Self {
            particles,
            gamma,
            execution: Execution::Serial,
            histograms: Vec::new(),
        }
    }
}

/// Per-step output of [`pf_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct PfStep<T: Real> {
    pub k: usize,
    /// Weighted mean and covariance before resampling.
    pub posterior: GaussianBelief<T>,
    pub ess: T,
    pub resampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfReport<T: Real> {
    /// Steps `k = 1..=N`.
    pub steps: Vec<PfStep<T>>,
    pub histograms: Vec<Histogram<T>>,
}

/// Runs the particle filter over `measurements` (`ŷ(1), ŷ(2), ...`).
pub fn pf_run<T: Real, M: NonlinearModel<T> + ?Sized>(
    measurements: &[DVector<T>],
    model: &M,
    theta: &DVector<T>,
    prior: &GaussianBelief<T>,
    cfg: &PfConfig<T>,
    plan: &RngStreamPlan,
) -> Result<PfReport<T>> {
    let mut set = pf_init(prior, cfg.particles, plan)?;
    let mut steps = Vec::with_capacity(measurements.len());
    let mut histograms = Vec::new();
    for (i, y) in measurements.iter().enumerate() {
        let k = i + 1;
        set = pf_propagate(&set, model, theta, plan, k, cfg.execution)?;
        reweight(&mut set, y, model, theta)?;
        let ess = pf_ess(&set)?;
        for &(component, at) in &cfg.histograms {
            if at == k {
                histograms.push(marginal_histogram(&set, component)?);
            }
        }
        let posterior = set.weighted_belief()?;
        let (next, resampled) = resample_owned(set, cfg.gamma, plan)?;
        set = next;
        steps.push(PfStep {
            k,
            posterior,
            ess,
            resampled,
        });
    }
    Ok(PfReport { steps, histograms })
}
