//! CSV and JSON writers. Numbers are written with 17 significant digits so
//! every `f64` round-trips exactly.

use std::path::Path;

use kfgum::watertank::{EstimationReport, Scenario, SimulationRecord};
use serde::Serialize;

use crate::CliError;

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let io = |e: csv::Error| {
            let source = match e.into_kind() {
                csv::ErrorKind::Io(err) => err,
                other => std::io::Error::other(format!("{other:?}")),
            };
            CliError::io(path, source)
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `k,t,x_L,x_s,y`; `y` is empty at `k = 0`.
pub fn simulation_table(record: &SimulationRecord) -> Table {
    let mut t = Table::new(["k", "t", "x_L", "x_s", "y"].map(String::from).to_vec());
    for (k, (time, x)) in record.times.iter().zip(&record.states).enumerate() {
        let y = if k == 0 {
            String::new()
        } else {
            num(record.measurements[k - 1])
        };
        t.rows
            .push(vec![k.to_string(), num(*time), num(x[0]), num(x[1]), y]);
    }
    t
}

fn estimate_columns(s: Scenario) -> Vec<&'static str> {
    let mut c = vec!["x_L", "x_s", "u_x_L", "u_x_s"];
    if s.has_theta() {
        c.extend(["theta", "u_theta"]);
    }
    if s == Scenario::Pf {
        c.push("ess");
    }
    c
}

fn estimate_values(report: &EstimationReport<f64>, i: usize) -> Vec<String> {
    let row = &report.rows[i];
    let u = row.state.std_devs();
    let mut v = vec![
        num(row.state.mean()[0]),
        num(row.state.mean()[1]),
        num(u[0]),
        num(u[1]),
    ];
    if let Some((th, ut)) = row.theta {
        v.extend([num(th), num(ut)]);
    }
    if let Some(ess) = row.ess {
        v.push(num(ess));
    }
    v
}

/// `k,t,x_L,x_s,u_x_L,u_x_s[,theta,u_theta][,ess]`.
pub fn estimate_table(report: &EstimationReport<f64>) -> Table {
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(
        estimate_columns(report.scenario)
            .into_iter()
            .map(String::from),
    );
    let mut t = Table::new(header);
    for (i, row) in report.rows.iter().enumerate() {
        let mut r = vec![row.k.to_string(), num(row.t)];
        r.extend(estimate_values(report, i));
        t.rows.push(r);
    }
    t
}

/// Truth, measurement and every scenario's columns prefixed `<scenario>.`.
pub fn compare_table(record: &SimulationRecord, reports: &[EstimationReport<f64>]) -> Table {
    let mut header: Vec<String> = ["k", "t", "true_x_L", "true_x_s", "y"]
        .map(String::from)
        .to_vec();
    for r in reports {
        header.extend(
            estimate_columns(r.scenario)
                .into_iter()
                .map(|c| format!("{}.{c}", r.scenario)),
        );
    }
    let mut t = Table::new(header);
    for i in 0..record.measurements.len() {
        let k = i + 1;
        let x = record.states[k];
        let mut row = vec![
            k.to_string(),
            num(record.times[k]),
            num(x[0]),
            num(x[1]),
            num(record.measurements[i]),
        ];
        for r in reports {
            row.extend(estimate_values(r, i));
        }
        t.rows.push(row);
    }
    t
}
