// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p qcclosure-core --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use num_complex::Complex64;
use qcclosure_core::dynamics::{
    energy_gradient, hamiltonian_h, hybrid_operator_field, integrated_smooth_part, rhs_ehrenfest, rhs_regularized,
    smooth_part_on_grid,
};
use qcclosure_core::integrate::{integrate_from, state_difference};
use qcclosure_core::kernel::compute_i_for;
use qcclosure_core::linalg::CMatrix;
use qcclosure_core::model::{pauli_x, pauli_z, HamiltonianTerm};
use qcclosure_core::{
    build_state, compute_i, compute_j, density_matrix, ClosureState, DiagnosticsRecord, HybridHamiltonian, KernelSetup,
    PureState, RunConfig, RunOutput,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Runs shared by several criteria.
struct Runs {
    regularized: RunOutput,
    ehrenfest: RunOutput,
    meanfield: RunOutput,
    single: [RunOutput; 3],
    start: ClosureState,
    setup: KernelSetup,
    hamiltonian: HybridHamiltonian,
}

fn run(cfg: &RunConfig) -> RunOutput {
    let closure = qcclosure_core::Closure::from_config(cfg).unwrap();
    let state = build_state(cfg).unwrap();
    integrate_from(cfg, &closure, state).unwrap()
}

fn prepare() -> Runs {
    let reg_cfg = spin_boson_config(&["deterministic=true"]);
    let closure = qcclosure_core::Closure::from_config(&reg_cfg).unwrap();
    let start = build_state(&reg_cfg).unwrap();
    let regularized = integrate_from(&reg_cfg, &closure, start.clone()).unwrap();
    let ehrenfest = run(&spin_boson_config(&["model=ehrenfest"]));
    let meanfield = run(&spin_boson_config(&["model=meanfield"]));
    let single = [
        run(&spin_boson_config(&["N=1", "deterministic=true"])),
        run(&spin_boson_config(&["N=1", "model=ehrenfest"])),
        run(&spin_boson_config(&["N=1", "model=meanfield"])),
    ];
    Runs {
        regularized,
        ehrenfest,
        meanfield,
        single,
        start,
        setup: closure.kernel.clone().unwrap(),
        hamiltonian: closure.hamiltonian,
    }
}

fn random_hamiltonian(rng: &mut ChaCha8Rng) -> HybridHamiltonian {
    let id = CMatrix::identity(2, 2);
    HybridHamiltonian::new(vec![
        HamiltonianTerm::new(rng.random_range(0.5..1.5), 0, 2, id.clone()),
        HamiltonianTerm::new(rng.random_range(0.5..1.5), 2, 0, id),
        HamiltonianTerm::new(rng.random_range(-1.0..1.0), 1, 0, pauli_z()),
        HamiltonianTerm::new(rng.random_range(-1.0..1.0), 0, 1, pauli_x()),
        HamiltonianTerm::new(rng.random_range(-1.0..1.0), 0, 0, pauli_x()),
    ])
    .unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> ClosureState {
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let states = (0..n)
        .map(|_| {
            let v: Vec<Complex64> = (0..2)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            PureState::normalized(qcclosure_core::linalg::CVector::from_vec(v)).unwrap()
        })
        .collect();
    weighted_ensemble(&pts, &w, states)
}

fn ehrenfest_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = setup(0.5, 5.0, 64);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=8);
        let h = random_hamiltonian(&mut rng);
        let state = random_state(&mut rng, n);
        let a = rhs_regularized(&state, &h, &s, false).unwrap();
        let b = rhs_ehrenfest(&state, &h).unwrap();
        worst = worst.max(a.max_difference(&b) / b.max_abs());
    }
    check(
        worst <= 1e-12,
        format!("20 random configs, max relative difference {worst:.1e} (tol 1e-12)"),
    )
}

fn single_trajectory(runs: &Runs) -> Outcome {
    let [reg, ehr, mf] = &runs.single;
    let d_re = state_difference(&reg.final_state, &ehr.final_state);
    let d_mr = state_difference(&mf.final_state, &reg.final_state);
    let d_me = state_difference(&mf.final_state, &ehr.final_state);
    let worst = d_re.max(d_mr).max(d_me);
    check(
        worst < 1e-8,
        format!("N=1, T=10, dt=1e-3: |reg-ehr| {d_re:.1e}, |mf-reg| {d_mr:.1e}, |mf-ehr| {d_me:.1e} (tol 1e-8)"),
    )
}

fn relative_drift(records: &[DiagnosticsRecord]) -> f64 {
    let e0 = records[0].energy;
    records.iter().map(|r| ((r.energy - e0) / e0).abs()).fold(0.0, f64::max)
}

fn energy_conservation(runs: &Runs) -> Outcome {
    let drift = relative_drift(&runs.regularized.diagnostics);
    // self-convergence of the endpoint over T = 1
    let cfg = |dt: f64| {
        spin_boson_config(&[
            "t_final=1.0",
            "output_every=100000",
            "deterministic=true",
            &format!("dt={dt}"),
        ])
    };
    let closure = qcclosure_core::Closure::from_config(&cfg(0.1)).unwrap();
    let end = |dt: f64| {
        integrate_from(&cfg(dt), &closure, runs.start.clone())
            .unwrap()
            .final_state
    };
    let reference = end(0.00625);
    let errs: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&dt| state_difference(&end(dt), &reference))
        .collect();
    let slopes: Vec<f64> = errs.windows(2).map(|p| (p[0] / p[1]).log2()).collect();
    let slope_ok = slopes.iter().all(|s| (s - 4.0).abs() <= 0.2);
    check(
        drift < 1e-6 && slope_ok,
        format!(
            "regularized N=8, T=10, dt=1e-3: relative drift {drift:.1e} (tol 1e-6); RK4 slopes {:.3}, {:.3} (4 ± 0.2)",
            slopes[0], slopes[1]
        ),
    )
}

fn all_runs(runs: &Runs) -> Vec<(&'static str, &RunOutput)> {
    vec![
        ("regularized", &runs.regularized),
        ("ehrenfest", &runs.ehrenfest),
        ("meanfield", &runs.meanfield),
        ("regularized N=1", &runs.single[0]),
        ("ehrenfest N=1", &runs.single[1]),
        ("meanfield N=1", &runs.single[2]),
    ]
}

fn unitarity(runs: &Runs) -> Outcome {
    let mut norm = 0.0_f64;
    let mut pur = 0.0_f64;
    let mut step = 0.0_f64;
    for (_, out) in all_runs(runs) {
        for r in &out.diagnostics {
            norm = norm.max(r.max_norm_deviation());
            pur = pur.max(r.max_trajectory_purity_deviation());
        }
        if out.final_state.states().is_some() {
            step = step.max(out.max_renorm_correction);
        }
    }
    check(
        norm <= 1e-8 && pur <= 1e-8 && step <= 1e-8,
        format!("norm dev {norm:.1e}, trajectory purity dev {pur:.1e}, largest per-step norm correction {step:.1e} (tol 1e-8)"),
    )
}

fn positivity(runs: &Runs) -> Outcome {
    let mut lowest = f64::INFINITY;
    for (_, out) in all_runs(runs) {
        for r in &out.diagnostics {
            lowest = lowest.min(r.min_eigenvalue);
        }
    }
    check(
        lowest >= -1e-9,
        format!("min eigenvalue of ρ over all records {lowest:.2e} (tol -1e-9)"),
    )
}

fn purity_swing(out: &RunOutput) -> f64 {
    let p0 = out.diagnostics[0].purity;
    out.diagnostics
        .iter()
        .map(|r| (r.purity - p0).abs())
        .fold(0.0, f64::max)
}

fn purity_behaviour(runs: &Runs) -> Outcome {
    let mf = purity_swing(&runs.meanfield);
    let ehr = purity_swing(&runs.ehrenfest);
    let reg = purity_swing(&runs.regularized);
    check(
        mf < 1e-8 && ehr > 1e-4 && reg > 1e-4,
        format!("max|ΔTr ρ²| mean-field {mf:.1e} (< 1e-8), ehrenfest {ehr:.1e}, regularized {reg:.1e} (> 1e-4)"),
    )
}

fn kernel_tables(runs: &Runs) -> Outcome {
    let mut antisym = true;
    let mut j_int = 0.0_f64;
    let mut herm = 0.0_f64;
    let mut doubling = 0.0_f64;
    let mut fine = runs.setup.clone();
    fine.grid = runs.setup.grid.refined(2);
    for state in [&runs.start, &runs.regularized.final_state] {
        let n = state.n_trajectories();
        let j = compute_j(&state.points, &state.weights, &runs.setup).unwrap();
        for a in 0..n {
            for b in 0..n {
                antisym &= (0..j.n_nodes()).all(|node| j.value(a, b, node) == -j.value(b, a, node));
                j_int = j_int.max(j.integral(a, b).abs());
            }
        }
        let coarse_i = compute_i(&runs.hamiltonian, &state.points, &state.weights, &runs.setup).unwrap();
        let fine_i = compute_i(&runs.hamiltonian, &state.points, &state.weights, &fine).unwrap();
        herm = herm.max(coarse_i.hermiticity_defect());
        for a in 0..n {
            for b in 0..n {
                doubling = doubling.max(max_entry(&(coarse_i.get(a, b) - fine_i.get(a, b))));
            }
        }
    }
    check(
        antisym && j_int < 1e-8 && herm < 1e-9 && doubling < 1e-8,
        format!(
            "J antisymmetric {antisym}, max|∫J| {j_int:.1e} (1e-8), I Hermiticity defect {herm:.1e} (1e-9), grid doubling {doubling:.1e} (1e-8)"
        ),
    )
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = setup(0.5, 5.0, 64);
    let eps = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let n = rng.random_range(1..=3);
        let h = random_hamiltonian(&mut rng);
        let state = random_state(&mut rng, n);
        let grad = energy_gradient(&state, &h, &s, true).unwrap();
        let energy = |st: &ClosureState| hamiltonian_h(st, &h, Some(&compute_i_for(st, &h, &s).unwrap())).unwrap();
        for a in 0..n {
            for axis in 0..2 {
                let shifted = |sign: f64| {
                    let mut pts = state.points.clone();
                    if axis == 0 {
                        pts[a].q += sign * eps
                    } else {
                        pts[a].p += sign * eps
                    }
                    energy(&ClosureState::new(pts, state.weights.clone(), state.quantum.clone(), 1.0).unwrap())
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
                let analytic = if axis == 0 { grad[a].0 } else { grad[a].1 };
                worst = worst.max((fd - analytic).abs() / fd.abs().max(1e-2));
            }
        }
    }
    check(
        worst <= 1e-6,
        format!("10 random configs N≤3, max relative error {worst:.1e} (tol 1e-6)"),
    )
}

fn hybrid_operator(runs: &Runs) -> Outcome {
    let mut trace = 0.0_f64;
    let mut integral = 0.0_f64;
    let mut marginal = 0.0_f64;
    let mut total = 0.0_f64;
    for state in [&runs.start, &runs.regularized.final_state] {
        let j = compute_j(&state.points, &state.weights, &runs.setup).unwrap();
        for m in smooth_part_on_grid(state, &j).unwrap() {
            trace = trace.max(m.trace().norm());
        }
        let smooth = integrated_smooth_part(state, &j).unwrap();
        integral = integral.max(smooth.camax());
        let field = hybrid_operator_field(state, &j, &[]).unwrap();
        let masses = field
            .point_masses
            .iter()
            .fold(CMatrix::zeros(2, 2), |acc, (_, m)| acc + m);
        // ∫D̂ = Σ_a w_a ρ_a + ∫(smooth part) should reproduce ρ̂
        marginal = marginal.max((masses + smooth - density_matrix(state).matrix()).camax());
        let mass: f64 = field.point_masses.iter().map(|(_, m)| m.trace().re).sum();
        total = total.max((mass - state.weights.as_slice().iter().sum::<f64>()).abs());
    }
    check(
        trace < 1e-12 && integral < 1e-8 && marginal < 1e-8 && total < 1e-12,
        format!(
            "pointwise |Tr| {trace:.1e} (1e-12), |∫ smooth| {integral:.1e} (1e-8), |∫D̂ − ρ| {marginal:.1e}, point-mass trace error {total:.1e}"
        ),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() -> ExitCode {
    let clock = Instant::now();
    let runs = prepare();
    println!("acceptance runs prepared in {:.1}s", clock.elapsed().as_secs_f64());
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("Ehrenfest reduction", Box::new(ehrenfest_reduction)),
        ("single-trajectory equivalence", Box::new(|| single_trajectory(&runs))),
        ("energy conservation", Box::new(|| energy_conservation(&runs))),
        ("unitarity", Box::new(|| unitarity(&runs))),
        ("positivity", Box::new(|| positivity(&runs))),
        ("purity behaviour", Box::new(|| purity_behaviour(&runs))),
        ("kernel-table structure", Box::new(|| kernel_tables(&runs))),
        ("gradient oracle", Box::new(gradient_oracle)),
        ("hybrid operator identities", Box::new(|| hybrid_operator(&runs))),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failures,
        criteria.len(),
        clock.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
