//! Sloshing water-tank benchmark.
//!
//! State `(x_L, x_s)`: water level and sloshing amplitude, with
//!
//! ```text
//! x(k) = [[1, 2πθ cos(2πθ t_{k-1})], [0, 1]] x(k-1) + (0, η(k)),  η ~ N(0, τ²)
//! y(k) = x_L(k) + ν(k),                                             ν ~ N(0, σ²)
//! ```
//!
//! and `t_k = k·dt`. The five estimation scenarios all run on the same
//! simulated record for a given [`RngStreamPlan`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{GaussianBelief, ParameterKnowledge};
use crate::ekf::{augment, run_ekf, AugmentedModel};
use crate::error::{EstimationError, Result};
use crate::gum_mc::{mc_sequential, Execution, ExtendedKf, LinearKf, McConfig};
use crate::kalman::run_kalman;
use crate::model::{LinearModel, NonlinearModel};
use crate::particle::{pf_run, Histogram, PfConfig};
use crate::rng::{RngStreamPlan, StreamLabel};
use crate::scalar::Real;

/// Current config schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Index of `θ` in the augmented state `(x_L, x_s, θ)`.
pub const THETA_INDEX: usize = 2;

/// Benchmark parameters. Lengths in cm, frequency in Hz, time in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TankConfig {
    pub schema_version: u32,
    /// Initial level `L₀`.
    pub l0: f64,
    /// Sloshing amplitude `x_s`.
    pub xs: f64,
    /// True sloshing frequency `θ`.
    pub theta: f64,
    /// State-noise std `τ`.
    pub tau: f64,
    /// Measurement-noise std `σ`.
    pub sigma: f64,
    /// Sampling interval.
    pub dt: f64,
    /// Number of steps `N`.
    pub n: usize,
    /// Std of the knowledge about `θ`; `0.01 θ` when absent.
    pub u_theta: Option<f64>,
    /// Process-noise std of the augmented `θ`; `u_θ / 100` when absent.
    pub alpha: Option<f64>,
    /// `θ̂ - θ`; zero means the estimate equals the true value.
    pub theta_hat_offset: f64,
}

impl Default for TankConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            l0: 100.0,
            xs: 0.01,
            theta: 0.8,
            tau: 0.01,
            sigma: 1.0,
            dt: 0.01,
            n: 1000,
            u_theta: None,
            alpha: None,
            theta_hat_offset: 0.0,
        }
    }
}

impl TankConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EstimationError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        for (name, v) in [
            ("l0", self.l0),
            ("xs", self.xs),
            ("theta", self.theta),
            ("theta_hat_offset", self.theta_hat_offset),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("sigma", self.sigma),
            ("u_theta", self.u_theta()),
            ("alpha", self.alpha()),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.n < 1 {
            return bad("n must be at least 1".into());
        }
        Ok(())
    }

    pub fn u_theta(&self) -> f64 {
        self.u_theta.unwrap_or(0.01 * self.theta)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.u_theta() / 100.0)
    }

    /// `θ̂`.
    pub fn theta_hat(&self) -> f64 {
        self.theta + self.theta_hat_offset
    }

    /// `t_k = k·dt`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Nearest time index to `t`, if it lies within `1..=N`.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        (k >= 1.0 && k <= self.n as f64).then_some(k as usize)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| EstimationError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// `N(θ̂, u_θ²)`.
    pub fn theta_knowledge<T: Real>(&self) -> Result<ParameterKnowledge<T>> {
        let u = T::lit(self.u_theta());
        ParameterKnowledge::new(dvector![T::lit(self.theta_hat())], dmatrix![u * u])
    }

    /// Prior of the two-dimensional state: `(L₀, x_s)`, `diag(0, τ²)`.
    pub fn linear_prior<T: Real>(&self) -> Result<GaussianBelief<T>> {
        let tau = T::lit(self.tau);
        GaussianBelief::new(
            dvector![T::lit(self.l0), T::lit(self.xs)],
            dmatrix![T::zero(), T::zero(); T::zero(), tau * tau],
        )
    }

    /// Augmented model and its prior `(L₀, x_s, θ̂)`, `diag(0, τ², u_θ²)`.
    pub fn augmented<T: Real>(&self) -> Result<(AugmentedTank<T>, GaussianBelief<T>)> {
        augment(
            TankModel::new(self),
            &self.linear_prior()?,
            &self.theta_knowledge()?,
            T::lit(self.alpha()),
        )
    }
}

/// The tank with `θ` appended to its state.
pub type AugmentedTank<T> = AugmentedModel<TankModel<T>, T>;

/// The tank as a parametric state-space model with `θ` as its one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TankModel<T: Real> {
    dt: T,
    tau: T,
    sigma: T,
}

impl<T: Real> TankModel<T> {
    pub fn new(cfg: &TankConfig) -> Self {
        Self {
            dt: T::lit(cfg.dt),
            tau: T::lit(cfg.tau),
            sigma: T::lit(cfg.sigma),
        }
    }

    /// `t_{k-1}`, the time at which the step into `k` starts.
    fn start_time(&self, k: usize) -> T {
        self.dt * T::from_usize(k.saturating_sub(1)).expect("index fits")
    }

    /// Coupling `2πθ cos(2πθ t_{k-1})` and its derivative in `θ`.
    fn coupling(&self, theta: T, k: usize) -> (T, T) {
        let two_pi = T::two_pi();
        let t = self.start_time(k);
        let w = two_pi * theta;
        let (s, c) = (w * t).sin_cos();
        (w * c, two_pi * c - w * s * two_pi * t)
    }
}

impl<T: Real> LinearModel<T> for TankModel<T> {
    fn state_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn transition(&self, k: usize, theta: &DVector<T>) -> DMatrix<T> {
        let (g, _) = self.coupling(theta[0], k);
        dmatrix![T::one(), g; T::zero(), T::one()]
    }
    fn observation(&self, _k: usize, _theta: &DVector<T>) -> DMatrix<T> {
        dmatrix![T::one(), T::zero()]
    }
    fn process_noise(&self, _k: usize) -> DMatrix<T> {
        dmatrix![T::zero(), T::zero(); T::zero(), self.tau * self.tau]
    }
    fn obs_noise(&self, _k: usize) -> DMatrix<T> {
        dmatrix![self.sigma * self.sigma]
    }
}

impl<T: Real> NonlinearModel<T> for TankModel<T> {
    fn state_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn state_fn(&self, x: &DVector<T>, theta: &DVector<T>, k: usize) -> DVector<T> {
        let (g, _) = self.coupling(theta[0], k);
        dvector![x[0] + g * x[1], x[1]]
    }
    fn obs_fn(&self, x: &DVector<T>, _theta: &DVector<T>, _k: usize) -> DVector<T> {
        dvector![x[0]]
    }
    fn process_noise(&self, k: usize) -> DMatrix<T> {
        LinearModel::process_noise(self, k)
    }
    fn obs_noise(&self, k: usize) -> DMatrix<T> {
        LinearModel::obs_noise(self, k)
    }
    fn state_jacobian(&self, _x: &DVector<T>, theta: &DVector<T>, k: usize) -> Option<DMatrix<T>> {
        Some(self.transition(k, theta))
    }
    fn obs_jacobian(&self, _x: &DVector<T>, _theta: &DVector<T>, _k: usize) -> Option<DMatrix<T>> {
        Some(dmatrix![T::one(), T::zero()])
    }
    fn state_param_jacobian(
        &self,
        x: &DVector<T>,
        theta: &DVector<T>,
        k: usize,
    ) -> Option<DMatrix<T>> {
        let (_, dg) = self.coupling(theta[0], k);
        Some(dmatrix![dg * x[1]; T::zero()])
    }
    fn obs_param_jacobian(
        &self,
        _x: &DVector<T>,
        _theta: &DVector<T>,
        _k: usize,
    ) -> Option<DMatrix<T>> {
        Some(DMatrix::zeros(1, 1))
    }
}

/// Simulated truth and measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRecord {
    /// `t_0, ..., t_N`.
    pub times: Vec<f64>,
    /// `x(0), ..., x(N)`.
    pub states: Vec<[f64; 2]>,
    /// `y(1), ..., y(N)`.
    pub measurements: Vec<f64>,
}

impl SimulationRecord {
    pub fn measurement_vectors<T: Real>(&self) -> Vec<DVector<T>> {
        self.measurements
            .iter()
            .map(|&y| dvector![T::lit(y)])
            .collect()
    }
}

/// Runs the true system with the configured `θ`, drawing `η(k)` and `ν(k)`
/// from substreams `(0, k, SimulationState)` and `(0, k, SimulationMeasurement)`.
pub fn simulate(cfg: &TankConfig, plan: &RngStreamPlan) -> Result<SimulationRecord> {
    cfg.validate()?;
    let mut times = Vec::with_capacity(cfg.n + 1);
    let mut states = Vec::with_capacity(cfg.n + 1);
    let mut measurements = Vec::with_capacity(cfg.n);
    let mut x = [cfg.l0, cfg.xs];
    times.push(0.0);
    states.push(x);
    let w = 2.0 * PI * cfg.theta;
    for k in 1..=cfg.n {
        let eta =
            f64::standard_normal(&mut plan.substream(0, k as u64, StreamLabel::SimulationState));
        let nu = f64::standard_normal(&mut plan.substream(
            0,
            k as u64,
            StreamLabel::SimulationMeasurement,
        ));
        let t_prev = cfg.time(k - 1);
        x = [x[0] + w * (w * t_prev).cos() * x[1], x[1] + cfg.tau * eta];
        times.push(cfg.time(k));
        states.push(x);
        measurements.push(x[0] + cfg.sigma * nu);
    }
    Ok(SimulationRecord {
        times,
        states,
        measurements,
    })
}

/// The five estimation pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Linear KF with the true `θ`.
    LkfKnown,
    /// GUM Monte Carlo over the linear KF, `θ⁽ᵐ⁾ ~ N(θ̂, u_θ²)` drawn once.
    McLkfUncertain,
    /// EKF on the state augmented with `θ`.
    EkfAugmented,
    /// GUM Monte Carlo over the augmented EKF.
    McEkf,
    /// Bootstrap particle filter on the augmented state.
    Pf,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::LkfKnown,
        Scenario::McLkfUncertain,
        Scenario::EkfAugmented,
        Scenario::McEkf,
        Scenario::Pf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::LkfKnown => "lkf-known",
            Scenario::McLkfUncertain => "mc-lkf-uncertain",
            Scenario::EkfAugmented => "ekf-augmented",
            Scenario::McEkf => "mc-ekf",
            Scenario::Pf => "pf",
        }
    }

    /// Whether the scenario estimates `θ`.
    pub fn has_theta(self) -> bool {
        !matches!(self, Scenario::LkfKnown)
    }

    pub fn is_monte_carlo(self) -> bool {
        matches!(self, Scenario::McLkfUncertain | Scenario::McEkf)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = EstimationError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| EstimationError::UnknownScenario(s.to_string()))
    }
}

/// Sample sizes and execution settings for the sampling scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOptions {
    /// Monte Carlo trials `M`.
    pub trials: usize,
    /// Particles `N_s`.
    pub particles: usize,
    /// Resampling tolerance `γ`.
    pub gamma: f64,
    pub execution: Execution,
    /// Time indices at which the particle filter records a histogram.
    pub histogram_at: Vec<usize>,
    /// Augmented-state component of those histograms.
    pub histogram_component: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            trials: 100_000,
            particles: 100_000,
            gamma: 0.9,
            execution: Execution::Serial,
            histogram_at: Vec::new(),
            histogram_component: THETA_INDEX,
        }
    }
}

/// One row of an [`EstimationReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow<T: Real> {
    pub k: usize,
    pub t: T,
    /// Estimate and covariance of `(x_L, x_s)`.
    pub state: GaussianBelief<T>,
    /// `(θ̂(k), u(θ̂(k)))` where the scenario estimates `θ`.
    pub theta: Option<(T, T)>,
    /// Effective sample size (particle filter only).
    pub ess: Option<T>,
}

/// Uniform output of every scenario, rows for `k = 1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport<T: Real> {
    pub scenario: Scenario,
    pub rows: Vec<ReportRow<T>>,
    /// Particle-filter marginals at the requested indices.
    pub histograms: Vec<Histogram<T>>,
}

fn x_block<T: Real>(b: &GaussianBelief<T>) -> GaussianBelief<T> {
    if b.dim() == 2 {
        return b.clone();
    }
    GaussianBelief::from_checked(
        b.mean().rows(0, 2).into_owned(),
        b.cov().view((0, 0), (2, 2)).into_owned(),
    )
}

fn theta_of<T: Real>(b: &GaussianBelief<T>, i: usize) -> (T, T) {
    (b.mean()[i], b.cov()[(i, i)].max(T::zero()).sqrt())
}

/// Simulates the record from `plan` and runs `name` on it.
pub fn scenario<T: Real>(
    name: &str,
    cfg: &TankConfig,
    plan: &RngStreamPlan,
    opts: &ScenarioOptions,
) -> Result<EstimationReport<T>> {
    let which: Scenario = name.parse()?;
    let record = simulate(cfg, plan)?;
    run_scenario(which, cfg, &record, plan, opts)
}

/// Runs one scenario on an existing record.
pub fn run_scenario<T: Real>(
    which: Scenario,
    cfg: &TankConfig,
    record: &SimulationRecord,
    plan: &RngStreamPlan,
    opts: &ScenarioOptions,
) -> Result<EstimationReport<T>> {
    cfg.validate()?;
    if record.measurements.is_empty() {
        return Err(EstimationError::Config("record has no measurements".into()));
    }
    let ys = record.measurement_vectors::<T>();
    let time = |k: usize| T::lit(cfg.time(k));
    let model = TankModel::<T>::new(cfg);
    let none = DVector::zeros(0);
    let mut histograms = Vec::new();
    let rows = match which {
        Scenario::LkfKnown => {
            let theta = dvector![T::lit(cfg.theta)];
            run_kalman(&cfg.linear_prior()?, &ys, &model, &theta)?
                .into_iter()
                .enumerate()
                .map(|(i, s)| ReportRow {
                    k: i + 1,
                    t: time(i + 1),
                    state: s.corrected,
                    theta: None,
                    ess: None,
                })
                .collect()
        }
        Scenario::EkfAugmented => {
            let (aug, prior) = cfg.augmented::<T>()?;
            run_ekf(&prior, &ys, &aug, &none)?
                .into_iter()
                .enumerate()
                .map(|(i, s)| ReportRow {
                    k: i + 1,
                    t: time(i + 1),
                    state: x_block(&s.corrected),
                    theta: Some(theta_of(&s.corrected, THETA_INDEX)),
                    ess: None,
                })
                .collect()
        }
        Scenario::McLkfUncertain | Scenario::McEkf => {
            let mut mc = McConfig::new(opts.trials);
            mc.execution = opts.execution;
            mc.quantiles = Vec::new();
            let mut rows = Vec::with_capacity(ys.len());
            let mut sink = |s: &crate::gum_mc::EnsembleSummary<T>,
                            _: &crate::gum_mc::McEnsemble<T>| {
                if s.k == 0 {
                    return;
                }
                let theta = if which == Scenario::McEkf {
                    theta_of(&s.state, THETA_INDEX)
                } else {
                    theta_of(&s.param, 0)
                };
                rows.push(ReportRow {
                    k: s.k,
                    t: time(s.k),
                    state: x_block(&s.state),
                    theta: Some(theta),
                    ess: None,
                });
            };
            if which == Scenario::McEkf {
                let (aug, prior) = cfg.augmented::<T>()?;
                let filter = ExtendedKf(aug);
                mc_sequential(
                    &filter,
                    &prior,
                    &ParameterKnowledge::none(),
                    &ys,
                    plan,
                    &mc,
                    &mut sink,
                )?;
            } else {
                let filter = LinearKf(model.clone());
                mc_sequential(
                    &filter,
                    &cfg.linear_prior()?,
                    &cfg.theta_knowledge()?,
                    &ys,
                    plan,
                    &mc,
                    &mut sink,
                )?;
            }
            rows
        }
        Scenario::Pf => {
            let (aug, prior) = cfg.augmented::<T>()?;
            let mut pf = PfConfig::new(opts.particles, T::lit(opts.gamma));
            pf.execution = opts.execution;
            pf.histograms = opts
                .histogram_at
                .iter()
                .map(|&k| (opts.histogram_component, k))
                .collect();
            let report = pf_run(&ys, &aug, &none, &prior, &pf, plan)?;
            histograms = report.histograms;
            report
                .steps
                .into_iter()
                .map(|s| ReportRow {
                    k: s.k,
                    t: time(s.k),
                    state: x_block(&s.posterior),
                    theta: Some(theta_of(&s.posterior, THETA_INDEX)),
                    ess: Some(s.ess),
                })
                .collect()
        }
    };
    Ok(EstimationReport {
        scenario: which,
        rows,
        histograms,
    })
}
