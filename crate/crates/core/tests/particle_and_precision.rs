use kfgum::ekf::run_ekf;
use kfgum::kalman::run_kalman;
use kfgum::model::{ConstantLinearModel, LinearAsNonlinear};
use kfgum::particle::{pf_run, PfConfig};
use kfgum::watertank::{
    run_scenario, simulate, Scenario, ScenarioOptions, TankConfig, THETA_INDEX,
};
use kfgum::{GaussianBelief, RngStreamPlan};
use nalgebra::{dmatrix, dvector, DVector};

#[test]
fn particle_filter_tracks_a_scalar_random_walk() {
    let model =
        ConstantLinearModel::new(dmatrix![1.0], dmatrix![1.0], dmatrix![0.2], dmatrix![0.4])
            .unwrap();
    let prior = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
    let ys: Vec<DVector<f64>> = [0.3, 0.1, 0.7, 1.2, 0.9, 1.5, 1.1, 0.8]
        .iter()
        .map(|&y| dvector![y])
        .collect();
    let none = DVector::zeros(0);
    let kf = run_kalman(&prior, &ys, &model, &none).unwrap();
    let cfg = PfConfig::new(20_000, 0.5);
    let pf = pf_run(
        &ys,
        &LinearAsNonlinear(model),
        &none,
        &prior,
        &cfg,
        &RngStreamPlan::new(4),
    )
    .unwrap();
    for (a, b) in kf.iter().zip(&pf.steps) {
        let sd = a.corrected.cov()[(0, 0)].sqrt();
        assert!((a.corrected.mean()[0] - b.posterior.mean()[0]).abs() < 0.05 * sd);
        assert!((a.corrected.cov()[(0, 0)] / b.posterior.cov()[(0, 0)] - 1.0).abs() < 0.06);
        assert!(b.ess >= 1.0 && b.ess <= 20_000.0);
    }
}

#[test]
fn resampling_follows_the_tolerance() {
    let model =
        ConstantLinearModel::new(dmatrix![1.0], dmatrix![1.0], dmatrix![0.1], dmatrix![0.01])
            .unwrap();
    let prior = GaussianBelief::new(dvector![0.0], dmatrix![1.0]).unwrap();
    let ys = vec![dvector![0.5]; 5];
    let none = DVector::zeros(0);
    let run = |gamma| {
        pf_run(
            &ys,
            &LinearAsNonlinear(model.clone()),
            &none,
            &prior,
            &PfConfig::new(500, gamma),
            &RngStreamPlan::new(2),
        )
        .unwrap()
    };
    for step in run(1.0).steps {
        assert_eq!(step.resampled, step.ess < 500.0);
    }
    // a sharp likelihood collapses the ESS well below half the particles
    let first = &run(0.5).steps[0];
    assert!(first.ess < 250.0);
    assert!(first.resampled);
    let lax = &run(0.01).steps[0];
    assert_eq!(lax.ess, first.ess);
    assert!(!lax.resampled);
}

#[test]
fn histograms_are_recorded_where_requested() {
    let cfg = TankConfig {
        n: 60,
        ..TankConfig::default()
    };
    let opts = ScenarioOptions {
        particles: 400,
        histogram_at: vec![20, 60],
        ..ScenarioOptions::default()
    };
    let plan = RngStreamPlan::new(8);
    let record = simulate(&cfg, &plan).unwrap();
    let report = run_scenario::<f64>(Scenario::Pf, &cfg, &record, &plan, &opts).unwrap();
    assert_eq!(report.histograms.len(), 2);
    for (h, k) in report.histograms.iter().zip([20, 60]) {
        assert_eq!((h.component, h.k), (THETA_INDEX, k));
        let area: f64 = h
            .edges
            .windows(2)
            .zip(&h.density)
            .map(|(e, d)| (e[1] - e[0]) * d)
            .sum();
        assert!((area - 1.0).abs() < 1e-9, "area {area}");
    }
}

#[test]
fn single_precision_tracks_double_precision() {
    let cfg = TankConfig {
        n: 300,
        ..TankConfig::default()
    };
    let plan = RngStreamPlan::new(42);
    let record = simulate(&cfg, &plan).unwrap();

    let (aug64, prior64) = cfg.augmented::<f64>().unwrap();
    let (aug32, prior32) = cfg.augmented::<f32>().unwrap();
    let e64 = run_ekf(
        &prior64,
        &record.measurement_vectors::<f64>(),
        &aug64,
        &DVector::zeros(0),
    )
    .unwrap();
    let e32 = run_ekf(
        &prior32,
        &record.measurement_vectors::<f32>(),
        &aug32,
        &DVector::zeros(0),
    )
    .unwrap();
    let (a, b) = (
        &e64.last().unwrap().corrected,
        &e32.last().unwrap().corrected,
    );
    for i in 0..3 {
        let sd = a.cov()[(i, i)].sqrt();
        assert!(
            ((b.mean()[i] as f64) - a.mean()[i]).abs() < sd,
            "component {i}"
        );
        let ratio = b.cov()[(i, i)] as f64 / a.cov()[(i, i)];
        assert!(
            (ratio - 1.0).abs() < 0.05,
            "component {i} variance ratio {ratio}"
        );
    }

    let lkf = run_scenario::<f32>(
        Scenario::LkfKnown,
        &cfg,
        &record,
        &plan,
        &ScenarioOptions::default(),
    )
    .unwrap();
    assert_eq!(lkf.rows.len(), 300);
    assert!(lkf
        .rows
        .iter()
        .all(|r| r.state.mean().iter().all(|v| v.is_finite())));
}
