//! Jobs, their manifests and the replay path.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kfgum::gum_mc::Execution;
use kfgum::particle::Histogram;
use kfgum::watertank::{
    run_scenario, simulate, EstimationReport, Scenario, ScenarioOptions, SimulationRecord,
    TankConfig,
};
use kfgum::RngStreamPlan;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, Common, Component, Sampling};
use crate::output::{compare_table, estimate_table, num, simulation_table, write_json, Table};
use crate::CliError;

/// What a run computes; stored in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Simulate,
    Estimate {
        scenario: Scenario,
        sampling: Sampling,
    },
    Compare {
        scenarios: Vec<Scenario>,
        sampling: Sampling,
    },
    PdfMarginal {
        component: Component,
        at: Vec<f64>,
        particles: usize,
        gamma: f64,
    },
}

impl Job {
    fn stem(&self) -> String {
        match self {
            Job::Simulate => "simulate".into(),
            Job::Estimate { scenario, .. } => format!("estimate_{scenario}"),
            Job::Compare { .. } => "compare".into(),
            Job::PdfMarginal { component, .. } => format!("pdf_{}", component.label()),
        }
    }

    fn trials(&self) -> Option<usize> {
        match self {
            Job::Estimate { scenario, sampling } if scenario.is_monte_carlo() => {
                Some(sampling.trials)
            }
            Job::Compare {
                scenarios,
                sampling,
            } if scenarios.iter().any(|s| s.is_monte_carlo()) => Some(sampling.trials),
            _ => None,
        }
    }

    fn particles(&self) -> Option<usize> {
        match self {
            Job::Estimate { scenario, sampling } if *scenario == Scenario::Pf => {
                Some(sampling.particles)
            }
            Job::Compare {
                scenarios,
                sampling,
            } if scenarios.contains(&Scenario::Pf) => Some(sampling.particles),
            Job::PdfMarginal { particles, .. } => Some(*particles),
            _ => None,
        }
    }
}

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
    /// Monte Carlo trials M, for jobs that use them.
    pub trials: Option<usize>,
    /// Particles N_s, for jobs that use them.
    pub particles: Option<usize>,
    pub config: TankConfig,
    /// Output files, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

struct Settings {
    seed: u64,
    config: TankConfig,
    threads: Option<usize>,
    deterministic: bool,
}

impl Settings {
    fn from_common(common: &Common) -> Result<Self, CliError> {
        let mut config = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                TankConfig::from_toml_str(&text)?
            }
            None => TankConfig::default(),
        };
        if let Some(n) = common.steps {
            config.n = n;
        }
        config.validate()?;
        Ok(Self {
            seed: common.seed,
            config,
            threads: common.threads,
            deterministic: common.deterministic,
        })
    }

    fn execution(&self) -> Execution {
        if self.deterministic {
            Execution::Serial
        } else {
            Execution::Parallel
        }
    }
}

fn parse_scenario(name: &str) -> Result<Scenario, CliError> {
    Ok(name.parse::<Scenario>()?)
}

fn job_from(command: Command) -> Result<Job, CliError> {
    Ok(match command {
        Command::Simulate => Job::Simulate,
        Command::Estimate { scenario, sampling } => Job::Estimate {
            scenario: parse_scenario(&scenario)?,
            sampling,
        },
        Command::Compare {
            scenarios,
            sampling,
        } => Job::Compare {
            scenarios: if scenarios.is_empty() {
                Scenario::ALL.to_vec()
            } else {
                scenarios
                    .iter()
                    .map(|s| parse_scenario(s))
                    .collect::<Result<_, _>>()?
            },
            sampling,
        },
        Command::PdfMarginal {
            component,
            at,
            particles,
            gamma,
        } => Job::PdfMarginal {
            component,
            at,
            particles,
            gamma,
        },
        Command::Replay { .. } => unreachable!("replay is resolved before"),
    })
}

fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs the command and returns the path of the manifest written.
pub fn execute(cli: Cli) -> Result<PathBuf, CliError> {
    let Cli { common, command } = cli;
    let (job, settings) = match command {
        Command::Replay { manifest } => {
            let m = read_manifest(&manifest)?;
            m.config.validate()?;
            let settings = Settings {
                seed: m.seed,
                config: m.config,
                threads: m.threads,
                deterministic: m.deterministic,
            };
            (m.job, settings)
        }
        other => (job_from(other)?, Settings::from_common(&common)?),
    };
    if let Some(n) = settings.threads {
        // fails only if the pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    run(&job, &settings, &common.out)
}

fn run(job: &Job, settings: &Settings, out: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let started = Instant::now();
    let cfg = &settings.config;
    let plan = RngStreamPlan::new(settings.seed);
    let mut outputs: Vec<(String, Output)> = Vec::new();

    match job {
        Job::Simulate => {
            let record = simulate(cfg, &plan)?;
            outputs.push((
                "simulation.csv".into(),
                Output::Csv(simulation_table(&record)),
            ));
        }
        Job::Estimate { scenario, sampling } => {
            let record = simulate(cfg, &plan)?;
            let opts = options(sampling, settings.execution());
            let report = run_scenario::<f64>(*scenario, cfg, &record, &plan, &opts)?;
            outputs.push((
                format!("{}.csv", job.stem()),
                Output::Csv(estimate_table(&report)),
            ));
        }
        Job::Compare {
            scenarios,
            sampling,
        } => {
            let record = simulate(cfg, &plan)?;
            let opts = options(sampling, settings.execution());
            let reports = scenarios
                .iter()
                .map(|s| run_scenario::<f64>(*s, cfg, &record, &plan, &opts))
                .collect::<Result<Vec<_>, _>>()?;
            outputs.push((
                "compare.csv".into(),
                Output::Csv(compare_table(&record, &reports)),
            ));
        }
        Job::PdfMarginal {
            component,
            at,
            particles,
            gamma,
        } => {
            outputs.extend(pdf_marginal(
                cfg,
                &plan,
                *component,
                at,
                *particles,
                *gamma,
                settings.execution(),
            )?);
        }
    }

    for (name, o) in &outputs {
        let path = out.join(name);
        match o {
            Output::Csv(t) => t.write(&path)?,
            Output::Json(v) => write_json(&path, v)?,
        }
    }
    let manifest = RunManifest {
        tool: "kfgum".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        job: job.clone(),
        seed: settings.seed,
        deterministic: settings.deterministic,
        threads: settings.threads,
        trials: job.trials(),
        particles: job.particles(),
        config: cfg.clone(),
        outputs: outputs.into_iter().map(|(n, _)| n).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let path = out.join(format!("{}.manifest.json", job.stem()));
    write_json(&path, &manifest)?;
    Ok(path)
}

enum Output {
    Csv(Table),
    Json(serde_json::Value),
}

fn options(sampling: &Sampling, execution: Execution) -> ScenarioOptions {
    ScenarioOptions {
        trials: sampling.trials,
        particles: sampling.particles,
        gamma: sampling.gamma,
        execution,
        ..ScenarioOptions::default()
    }
}

fn gaussian_density(x: f64, mean: f64, std: f64) -> f64 {
    if std <= 0.0 {
        return if x == mean { f64::INFINITY } else { 0.0 };
    }
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

fn ekf_marginal(report: &EstimationReport<f64>, k: usize, component: Component) -> (f64, f64) {
    let row = &report.rows[k - 1];
    match component {
        Component::Theta => row.theta.expect("augmented EKF estimates theta"),
        c => (row.state.mean()[c.index()], row.state.std_devs()[c.index()]),
    }
}

/// Histogram table `bin_left,bin_right,density,ekf_density` and its metadata.
fn histogram_outputs(
    h: &Histogram<f64>,
    t: f64,
    component: Component,
    ekf: (f64, f64),
    ess: f64,
) -> (Table, serde_json::Value) {
    let mut table = Table {
        header: ["bin_left", "bin_right", "density", "ekf_density"]
            .map(String::from)
            .to_vec(),
        rows: Vec::new(),
    };
    for (i, d) in h.density.iter().enumerate() {
        let (lo, hi) = (h.edges[i], h.edges[i + 1]);
        let ekf_d = gaussian_density(0.5 * (lo + hi), ekf.0, ekf.1);
        table.rows.push(vec![num(lo), num(hi), num(*d), num(ekf_d)]);
    }
    let meta = serde_json::json!({
        "component": component.label(),
        "t": t,
        "k": h.k,
        "bins": h.bins(),
        "binning": "freedman-diaconis",
        "particle_mean": h.mean,
        "particle_std": h.std_dev,
        "effective_sample_size": ess,
        "ekf_mean": ekf.0,
        "ekf_std": ekf.1,
    });
    (table, meta)
}

fn time_label(t: f64) -> String {
    format!("{t}")
}

fn pdf_marginal(
    cfg: &TankConfig,
    plan: &RngStreamPlan,
    component: Component,
    at: &[f64],
    particles: usize,
    gamma: f64,
    execution: Execution,
) -> Result<Vec<(String, Output)>, CliError> {
    if at.is_empty() {
        return Err(CliError::Config("--at needs at least one time".into()));
    }
    let ks = at
        .iter()
        .map(|&t| {
            cfg.index_at(t).ok_or_else(|| {
                CliError::Config(format!(
                    "t = {t} s is outside the simulated horizon ({} s)",
                    cfg.time(cfg.n)
                ))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(i) = (1..ks.len()).find(|&i| ks[..i].contains(&ks[i])) {
        return Err(CliError::Config(format!(
            "t = {} s maps to an index already requested",
            at[i]
        )));
    }
    // nothing after the last requested time is needed
    let mut horizon = cfg.clone();
    horizon.n = *ks.iter().max().expect("non-empty");
    let record: SimulationRecord = simulate(&horizon, plan)?;
    let opts = ScenarioOptions {
        particles,
        gamma,
        execution,
        histogram_at: ks.clone(),
        histogram_component: component.index(),
        ..ScenarioOptions::default()
    };
    let pf = run_scenario::<f64>(Scenario::Pf, &horizon, &record, plan, &opts)?;
    let ekf = run_scenario::<f64>(Scenario::EkfAugmented, &horizon, &record, plan, &opts)?;

    let mut out = Vec::new();
    for (&t, &k) in at.iter().zip(&ks) {
        let h = pf
            .histograms
            .iter()
            .find(|h| h.k == k)
            .expect("histogram recorded at every requested index");
        let ess = pf.rows[k - 1].ess.expect("particle filter reports ESS");
        let (table, meta) =
            histogram_outputs(h, t, component, ekf_marginal(&ekf, k, component), ess);
        let stem = format!("pdf_{}_t{}", component.label(), time_label(t));
        out.push((format!("{stem}.csv"), Output::Csv(table)));
        out.push((format!("{stem}.json"), Output::Json(meta)));
    }
    Ok(out)
}
