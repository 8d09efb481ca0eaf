// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::path::PathBuf;

use num_complex::Complex64;
use qcclosure_core::linalg::{CMatrix, CVector};
use qcclosure_core::{
    ClosureState, KernelSetup, Mollifier, PhasePoint, PureState, QuadratureGrid, QuantumPart, RunConfig, Weights,
};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn spin_boson_config(overrides: &[&str]) -> RunConfig {
    let text = std::fs::read_to_string(fixture_path("spin_boson.toml")).unwrap();
    RunConfig::from_toml_with_overrides(&text, overrides).unwrap()
}

pub fn z(q: f64, p: f64) -> PhasePoint {
    PhasePoint::new(q, p).unwrap()
}

pub fn pure(amps: &[(f64, f64)]) -> PureState {
    PureState::normalized(CVector::from_iterator(
        amps.len(),
        amps.iter().map(|&(r, i)| Complex64::new(r, i)),
    ))
    .unwrap()
}

pub fn ensemble(points: &[(f64, f64)], states: Vec<PureState>, hbar: f64) -> ClosureState {
    let pts = points.iter().map(|&(q, p)| z(q, p)).collect::<Vec<_>>();
    let w = Weights::uniform(pts.len()).unwrap();
    ClosureState::new(pts, w, QuantumPart::PerTrajectory(states), hbar).unwrap()
}

pub fn weighted_ensemble(points: &[(f64, f64)], weights: &[f64], states: Vec<PureState>) -> ClosureState {
    let pts = points.iter().map(|&(q, p)| z(q, p)).collect::<Vec<_>>();
    let w = Weights::normalized(weights.to_vec()).unwrap();
    ClosureState::new(pts, w, QuantumPart::PerTrajectory(states), 1.0).unwrap()
}

/// Square box [-half, half]² with `nodes` nodes per axis, exact (no cutoff).
pub fn setup(alpha: f64, half: f64, nodes: usize) -> KernelSetup {
    KernelSetup::new(
        Mollifier::new(alpha).unwrap(),
        QuadratureGrid::new([-half, half], [-half, half], [nodes, nodes]).unwrap(),
    )
    .exact()
}

pub fn max_entry(m: &CMatrix) -> f64 {
    m.iter().map(|x| x.norm()).fold(0.0, f64::max)
}
