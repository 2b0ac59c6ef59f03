//! Linear and extended Kalman filtering with GUM-compliant uncertainty
//! propagation (linearized and Monte Carlo, batch and sequential) and a
//! bootstrap particle filter, plus the sloshing water-tank benchmark.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix the common double-precision case.

pub mod belief;
pub mod covariance;
pub mod ekf;
pub mod error;
pub mod gum_mc;
pub mod kalman;
pub mod model;
pub mod particle;
pub mod rng;
pub mod scalar;
pub mod watertank;

pub use belief::{GaussianBelief, ParameterKnowledge};
pub use error::{EstimationError, Result};
pub use rng::{RngStreamPlan, StreamLabel};
pub use scalar::Real;

pub type GaussianBelief64 = GaussianBelief<f64>;
pub type ParameterKnowledge64 = ParameterKnowledge<f64>;
pub type McEnsemble64 = gum_mc::McEnsemble<f64>;
pub type ParticleSet64 = particle::ParticleSet<f64>;
pub type EstimationReport64 = watertank::EstimationReport<f64>;
pub type TankModel64 = watertank::TankModel<f64>;
