// SPDX-License-Identifier: Apache-2.0

//! Fixed-step RK4 on the joint (ζ, ψ) or (ζ, ρ̂) state, and run orchestration.

use log::{debug, warn};
use num_complex::Complex64;

use crate::config::RunConfig;
use crate::diagnostics::{self, DiagnosticsRecord};
use crate::dynamics::{Closure, QuantumDerivative, StateDerivative};
use crate::error::{Error, Result};
use crate::model::{build_state, ClosureState, DensityMatrix, PhasePoint, PureState, QuantumPart};

/// Per-step renormalization corrections above this are reported.
pub const RENORM_WARN: f64 = 1e-10;

/// y + h·d without re-checking the state invariants (Runge-Kutta stages are not normalized).
fn displaced(state: &ClosureState, d: &StateDerivative, h: f64) -> ClosureState {
    let points = state
        .points
        .iter()
        .zip(d.dq.iter().zip(&d.dp))
        .map(|(z, (vq, vp))| PhasePoint {
            q: z.q + h * vq,
            p: z.p + h * vp,
        })
        .collect();
    let hc = Complex64::new(h, 0.0);
    let quantum = match (&state.quantum, &d.quantum) {
        (QuantumPart::PerTrajectory(states), QuantumDerivative::PerTrajectory(ds)) => QuantumPart::PerTrajectory(
            states
                .iter()
                .zip(ds)
                .map(|(s, v)| PureState::from_raw(s.vector() + v * hc))
                .collect(),
        ),
        (QuantumPart::Shared(rho), QuantumDerivative::Shared(dr)) => {
            QuantumPart::Shared(DensityMatrix::from_raw(rho.matrix() + dr * hc))
        }
        _ => unreachable!("derivative variant always matches the state"),
    };
    ClosureState {
        points,
        weights: state.weights.clone(),
        quantum,
        hbar: state.hbar,
    }
}

/// Σ_i c_i k_i
fn combine(parts: &[(f64, &StateDerivative)]) -> StateDerivative {
    let (c0, first) = parts[0];
    let mut out = StateDerivative {
        dq: first.dq.iter().map(|x| c0 * x).collect(),
        dp: first.dp.iter().map(|x| c0 * x).collect(),
        quantum: match &first.quantum {
            QuantumDerivative::PerTrajectory(v) => {
                QuantumDerivative::PerTrajectory(v.iter().map(|x| x * Complex64::new(c0, 0.0)).collect())
            }
            QuantumDerivative::Shared(m) => QuantumDerivative::Shared(m * Complex64::new(c0, 0.0)),
        },
    };
    for &(ci, k) in &parts[1..] {
        let cc = Complex64::new(ci, 0.0);
        for (o, x) in out.dq.iter_mut().zip(&k.dq) {
            *o += ci * x;
        }
        for (o, x) in out.dp.iter_mut().zip(&k.dp) {
            *o += ci * x;
        }
        match (&mut out.quantum, &k.quantum) {
            (QuantumDerivative::PerTrajectory(o), QuantumDerivative::PerTrajectory(v)) => {
                for (a, b) in o.iter_mut().zip(v) {
                    *a += b * cc;
                }
            }
            (QuantumDerivative::Shared(o), QuantumDerivative::Shared(m)) => *o += m * cc,
            _ => unreachable!("derivative variants agree within one step"),
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: ClosureState,
    /// |1 − |ψ_a|| before renormalization (max over trajectories), or the
    /// Hermiticity defect removed from ρ̂ for the shared variant.
    pub renorm_correction: f64,
}

/// One classical RK4 step of size `dt` starting at time `t`.
pub fn step_rk4<F>(state: &ClosureState, rhs: F, dt: f64, t: f64) -> Result<StepOutcome>
where
    F: Fn(&ClosureState) -> Result<StateDerivative>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("step size {dt} must be positive")));
    }
    let checked = |d: StateDerivative, time: f64| match d.first_non_finite() {
        Some(trajectory) => Err(Error::Divergence { trajectory, time }),
        None => Ok(d),
    };
    let k1 = checked(rhs(state).map_err(|e| e.at_time(t))?, t)?;
    let s2 = displaced(state, &k1, 0.5 * dt);
    let k2 = checked(rhs(&s2).map_err(|e| e.at_time(t + 0.5 * dt))?, t + 0.5 * dt)?;
    let s3 = displaced(state, &k2, 0.5 * dt);
    let k3 = checked(rhs(&s3).map_err(|e| e.at_time(t + 0.5 * dt))?, t + 0.5 * dt)?;
    let s4 = displaced(state, &k3, dt);
    let k4 = checked(rhs(&s4).map_err(|e| e.at_time(t + dt))?, t + dt)?;
    let incr = combine(&[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)]);
    let mut next = displaced(state, &incr, 1.0);
    let correction = match &mut next.quantum {
        QuantumPart::PerTrajectory(states) => states.iter_mut().map(PureState::renormalize).fold(0.0, f64::max),
        QuantumPart::Shared(rho) => rho.hermitize(),
    };
    debug!("t = {t}: renormalization correction {correction:e}");
    Ok(StepOutcome {
        state: next,
        renorm_correction: correction,
    })
}

/// Times and state snapshots at the output cadence.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<ClosureState>,
}

/// Receives records and snapshots as a run progresses.
pub trait RunObserver {
    fn on_record(&mut self, record: &DiagnosticsRecord, state: &ClosureState) -> Result<()>;

    /// Called every `snapshot_every` steps and always for the final state.
    fn on_snapshot(&mut self, _step: usize, _t: f64, _state: &ClosureState, _record: &DiagnosticsRecord) -> Result<()> {
        Ok(())
    }
}

/// Result of [`integrate`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: TrajectoryRecord,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub final_state: ClosureState,
    pub max_renorm_correction: f64,
}

struct Collector {
    trajectory: TrajectoryRecord,
    diagnostics: Vec<DiagnosticsRecord>,
}

impl RunObserver for Collector {
    fn on_record(&mut self, record: &DiagnosticsRecord, state: &ClosureState) -> Result<()> {
        self.trajectory.times.push(record.t);
        self.trajectory.states.push(state.clone());
        self.diagnostics.push(record.clone());
        Ok(())
    }
}

/// Builds the initial state from `config` and integrates to `t_final`.
pub fn integrate(config: &RunConfig) -> Result<RunOutput> {
    let closure = Closure::from_config(config)?;
    let state = build_state(config)?;
    integrate_from(config, &closure, state)
}

/// Integrates a given initial state with the time settings of `config`.
pub fn integrate_from(config: &RunConfig, closure: &Closure, state: ClosureState) -> Result<RunOutput> {
    let mut collector = Collector {
        trajectory: TrajectoryRecord::default(),
        diagnostics: Vec::new(),
    };
    let (final_state, max_renorm_correction) = run_with_observer(config, closure, state, &mut collector)?;
    Ok(RunOutput {
        trajectory: collector.trajectory,
        diagnostics: collector.diagnostics,
        final_state,
        max_renorm_correction,
    })
}

/// Drives the time loop, handing records and snapshots to `observer`.
/// Returns the final state and the largest per-step renormalization correction.
pub fn run_with_observer(
    config: &RunConfig,
    closure: &Closure,
    mut state: ClosureState,
    observer: &mut dyn RunObserver,
) -> Result<(ClosureState, f64)> {
    config.validate()?;
    state.check_variant(closure.model)?;
    let samples: Vec<PhasePoint> = config
        .output
        .operator_samples
        .iter()
        .map(|[q, p]| PhasePoint { q: *q, p: *p })
        .collect();
    let samples = if closure.model == crate::ModelKind::Regularized {
        samples
    } else {
        Vec::new()
    };
    let (n_steps, last_dt) = config.step_plan();
    let dt = config.time.dt;
    let every = config.time.output_every;
    let snap_every = config.time.snapshot_every;

    let first = diagnostics::record(&state, closure, 0, 0.0, 0.0, &samples).map_err(|e| e.at_time(0.0))?;
    observer.on_record(&first, &state)?;
    if snap_every > 0 {
        observer.on_snapshot(0, 0.0, &state, &first)?;
    }

    let mut t = 0.0;
    let mut since_record = 0.0_f64;
    let mut worst = 0.0_f64;
    for step in 1..=n_steps {
        let h = if step == n_steps { last_dt } else { dt };
        let outcome = step_rk4(&state, |s| closure.rhs(s), h, t)?;
        if outcome.renorm_correction > RENORM_WARN && worst <= RENORM_WARN {
            warn!(
                "t = {t}: renormalization correction {:e} exceeds {RENORM_WARN:e}; consider a smaller dt",
                outcome.renorm_correction
            );
        }
        state = outcome.state;
        since_record = since_record.max(outcome.renorm_correction);
        worst = worst.max(outcome.renorm_correction);
        t = if step == n_steps {
            config.time.t_final
        } else {
            step as f64 * dt
        };
        let is_last = step == n_steps;
        let want_snapshot = is_last || (snap_every > 0 && step % snap_every == 0);
        if is_last || step % every == 0 || want_snapshot {
            let rec =
                diagnostics::record(&state, closure, step, t, since_record, &samples).map_err(|e| e.at_time(t))?;
            if is_last || step % every == 0 {
                observer.on_record(&rec, &state)?;
                since_record = 0.0;
            }
            if want_snapshot {
                observer.on_snapshot(step, t, &state, &rec)?;
            }
        }
    }
    if worst > RENORM_WARN {
        warn!("largest renormalization correction of the run: {worst:e}");
    }
    Ok((state, worst))
}

/// Largest component difference between two states of the same shape.
pub fn state_difference(a: &ClosureState, b: &ClosureState) -> f64 {
    let mut worst = 0.0_f64;
    for (x, y) in a.points.iter().zip(&b.points) {
        worst = worst.max((x.q - y.q).abs()).max((x.p - y.p).abs());
    }
    match (&a.quantum, &b.quantum) {
        (QuantumPart::PerTrajectory(u), QuantumPart::PerTrajectory(v)) => {
            for (s, r) in u.iter().zip(v) {
                worst = worst.max((s.vector() - r.vector()).camax());
            }
        }
        (QuantumPart::Shared(u), QuantumPart::Shared(v)) => worst = worst.max((u.matrix() - v.matrix()).camax()),
        // Compare ρ_a-level data when one side is a pure single trajectory.
        (QuantumPart::PerTrajectory(u), QuantumPart::Shared(v))
        | (QuantumPart::Shared(v), QuantumPart::PerTrajectory(u)) => {
            let rho = crate::model::density_matrix(&ClosureState {
                points: a.points.clone(),
                weights: a.weights.clone(),
                quantum: QuantumPart::PerTrajectory(u.clone()),
                hbar: a.hbar,
            });
            worst = worst.max((rho.matrix() - v.matrix()).camax());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rhs_ehrenfest;
    use crate::linalg::CVector;
    use crate::model::{HybridHamiltonian, Weights};
    use std::f64::consts::PI;

    fn oscillator_state(q: f64, p: f64) -> ClosureState {
        ClosureState::new(
            vec![PhasePoint::new(q, p).unwrap()],
            Weights::uniform(1).unwrap(),
            QuantumPart::PerTrajectory(vec![PureState::new(CVector::from_vec(vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
            ]))
            .unwrap()]),
            1.0,
        )
        .unwrap()
    }

    fn zero_rhs(s: &ClosureState) -> Result<StateDerivative> {
        let n = s.n_trajectories();
        Ok(StateDerivative {
            dq: vec![0.0; n],
            dp: vec![0.0; n],
            quantum: QuantumDerivative::PerTrajectory(vec![CVector::zeros(s.dim()); n]),
        })
    }

    #[test]
    fn zero_field_is_a_fixed_point() {
        let s = oscillator_state(0.3, -0.7);
        let out = step_rk4(&s, zero_rhs, 0.1, 0.0).unwrap();
        assert_eq!(out.state, s);
        assert_eq!(out.renorm_correction, 0.0);
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let h = HybridHamiltonian::spin_boson(1.0, 0.0, 0.0);
        let mut s = oscillator_state(1.0, 0.0);
        let t_final = 2.0 * PI;
        let dt = 1e-3;
        let full = (t_final / dt).floor() as usize;
        let mut t = 0.0;
        for _ in 0..full {
            s = step_rk4(&s, |x| rhs_ehrenfest(x, &h), dt, t).unwrap().state;
            t += dt;
        }
        let rest = t_final - full as f64 * dt;
        s = step_rk4(&s, |x| rhs_ehrenfest(x, &h), rest, t).unwrap().state;
        let z = s.points[0];
        assert!((z.q - 1.0).abs() < 1e-10, "q = {}", z.q);
        assert!(z.p.abs() < 1e-10, "p = {}", z.p);
    }

    #[test]
    fn nan_derivative_reports_divergence() {
        let s = oscillator_state(0.0, 0.0);
        let bad = |s: &ClosureState| {
            let mut d = zero_rhs(s)?;
            d.dp[0] = f64::NAN;
            Ok(d)
        };
        match step_rk4(&s, bad, 0.1, 2.5) {
            Err(Error::Divergence { trajectory, time }) => {
                assert_eq!(trajectory, 0);
                assert_eq!(time, 2.5);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let s = oscillator_state(0.0, 0.0);
        assert!(step_rk4(&s, zero_rhs, 0.0, 0.0).is_err());
    }
}
