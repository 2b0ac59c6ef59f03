use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "kfgum",
    version,
    about = "Kalman filtering with GUM uncertainty propagation on the sloshing water tank"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Tank configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed of the random-number plan.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, env = "KFGUM_OUT_DIR", default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for trials and particles.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Serial evaluation and reduction order; outputs are bit-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Overrides the number of time steps N of the configuration.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, Args, Serialize, Deserialize, PartialEq)]
pub struct Sampling {
    /// Monte Carlo trials M.
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    /// Particles N_s.
    #[arg(long, default_value_t = 100_000)]
    pub particles: usize,
    /// Resampling tolerance factor.
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the tank and write the true states and measurements.
    Simulate,
    /// Run one scenario: lkf-known, mc-lkf-uncertain, ekf-augmented, mc-ekf or pf.
    Estimate {
        scenario: String,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Run several scenarios on the same record and join them into one table.
    Compare {
        /// Comma-separated scenario names; all five when omitted.
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Particle-filter marginal histograms against the EKF's Gaussian.
    PdfMarginal {
        #[arg(long, value_enum, default_value_t = Component::Theta)]
        component: Component,
        /// Comma-separated times in seconds.
        #[arg(long, value_delimiter = ',', default_value = "2,8")]
        at: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        particles: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
    },
    /// Re-run the job recorded in a manifest.
    Replay { manifest: PathBuf },
}

/// Component of the augmented state `(x_L, x_s, θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Theta,
    XL,
    XS,
}

impl Component {
    pub fn index(self) -> usize {
        match self {
            Component::XL => 0,
            Component::XS => 1,
            Component::Theta => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Component::XL => "x_L",
            Component::XS => "x_s",
            Component::Theta => "theta",
        }
    }
}
