// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use qcclosure_core::dynamics::Closure;
use qcclosure_core::integrate::{integrate_from, state_difference};
use qcclosure_core::{build_state, integrate, ModelKind, QuantumPart};

#[test]
fn degenerate_ensemble_sits_on_the_mean() {
    let cfg = spin_boson_config(&[
        "N=1",
        "ensemble.covariance=[[0.0, 0.0], [0.0, 0.0]]",
        "ensemble.mean=[0.25, -0.5]",
    ]);
    let state = build_state(&cfg).unwrap();
    assert_eq!(state.points[0].q, 0.25);
    assert_eq!(state.points[0].p, -0.5);
}

#[test]
fn same_seed_same_ensemble() {
    let cfg = spin_boson_config(&[]);
    let a = build_state(&cfg).unwrap();
    let b = build_state(&cfg).unwrap();
    for (x, y) in a.points.iter().zip(&b.points) {
        assert_eq!(x.q.to_bits(), y.q.to_bits());
        assert_eq!(x.p.to_bits(), y.p.to_bits());
    }
    let c = build_state(&spin_boson_config(&["seed=7"])).unwrap();
    assert_ne!(a.points[0], c.points[0]);
}

#[test]
fn large_ensemble_mean_within_sampling_error() {
    let n = 10_000;
    let cfg = spin_boson_config(&[
        "model=ehrenfest",
        &format!("N={n}"),
        "ensemble.covariance=[[0.09, 0.03], [0.03, 0.04]]",
    ]);
    let state = build_state(&cfg).unwrap();
    let mq = state.points.iter().map(|z| z.q).sum::<f64>() / n as f64;
    let mp = state.points.iter().map(|z| z.p).sum::<f64>() / n as f64;
    assert!((mq - 1.0).abs() < 3.0 * 0.3 / (n as f64).sqrt(), "{mq}");
    assert!(mp.abs() < 3.0 * 0.2 / (n as f64).sqrt(), "{mp}");
    let cov_qp = state.points.iter().map(|z| (z.q - mq) * (z.p - mp)).sum::<f64>() / (n - 1) as f64;
    assert!((cov_qp - 0.03).abs() < 0.005, "{cov_qp}");
}

#[test]
fn meanfield_starts_from_ensemble_density() {
    let state = build_state(&spin_boson_config(&["model=meanfield"])).unwrap();
    let QuantumPart::Shared(rho) = &state.quantum else {
        panic!()
    };
    assert!((rho.matrix()[(0, 0)].re - 1.0).abs() < 1e-15);
}

#[test]
fn records_follow_output_cadence() {
    let cfg = spin_boson_config(&["model=ehrenfest", "dt=0.01", "t_final=0.255", "output_every=5"]);
    let out = integrate(&cfg).unwrap();
    let times = &out.trajectory.times;
    assert_eq!(times[0], 0.0);
    assert_eq!(*times.last().unwrap(), 0.255);
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    let steps: Vec<usize> = out.diagnostics.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 15, 20, 25, 26]);
}

#[test]
fn regularized_without_coupling_tracks_ehrenfest() {
    let reg = spin_boson_config(&["coupling_hbar_terms=false", "dt=0.01", "t_final=1.0"]);
    let ehr = spin_boson_config(&["model=ehrenfest", "dt=0.01", "t_final=1.0"]);
    let a = integrate(&reg).unwrap();
    let b = integrate(&ehr).unwrap();
    assert_eq!(state_difference(&a.final_state, &b.final_state), 0.0);
}

/// Endpoint error against a fine reference shrinks by 16 per halving of dt.
#[test]
fn rk4_self_convergence() {
    let base = ["dt=0.1", "t_final=1.0", "output_every=1000"];
    let cfg = spin_boson_config(&base);
    let closure = Closure::from_config(&cfg).unwrap();
    let start = build_state(&cfg).unwrap();
    let run = |dt: f64| {
        let c = spin_boson_config(&["t_final=1.0", "output_every=1000", &format!("dt={dt}")]);
        integrate_from(&c, &closure, start.clone()).unwrap().final_state
    };
    let reference = run(0.00625);
    let errs: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&dt| state_difference(&run(dt), &reference))
        .collect();
    for pair in errs.windows(2) {
        let slope = (pair[0] / pair[1]).log2();
        assert!((slope - 4.0).abs() < 0.3, "errors {errs:?}");
    }
}

#[test]
fn regularized_run_is_reproducible() {
    let cfg = spin_boson_config(&["dt=0.01", "t_final=0.2", "deterministic=true"]);
    let a = integrate(&cfg).unwrap();
    let b = integrate(&spin_boson_config(&["dt=0.01", "t_final=0.2"])).unwrap();
    assert_eq!(state_difference(&a.final_state, &b.final_state), 0.0);
    assert_eq!(
        a.diagnostics.last().unwrap().energy,
        b.diagnostics.last().unwrap().energy
    );
}

#[test]
fn trajectory_leaving_the_box_is_reported() {
    let cfg = spin_boson_config(&[
        "model=regularized",
        "ensemble.mean=[2.9, 0.0]",
        "N=1",
        "ensemble.covariance=[[0.0,0.0],[0.0,0.0]]",
        "dt=0.05",
        "t_final=4.0",
    ]);
    let err = integrate(&cfg).unwrap_err();
    assert_eq!(err.root().kind(), "geometry");
    assert!(
        matches!(err, qcclosure_core::Error::AtTime { time, .. } if time > 0.0),
        "{err}"
    );
    assert_eq!(ModelKind::Regularized.name(), "regularized");
}
