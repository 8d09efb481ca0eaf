// SPDX-License-Identifier: Apache-2.0

//! Right-hand sides of the three closures.
//!
//! The regularized closure evolves each trajectory by
//!
//! ```text
//! q̇_a = w_a⁻¹ ∂h/∂p_a     ṗ_a = −w_a⁻¹ ∂h/∂q_a     iħ ψ̇_a = G_a ψ_a
//! h   = Σ_a w_a ⟨ψ_a|Ĥ_a ψ_a⟩ + ħ Σ_ab w_a w_b Tr(i[ρ_a, ρ_b] I_ab)
//! G_a = Ĥ_a + iħ Σ_b w_b [ρ_b, I_ab − I_ba]
//! ```
//!
//! with ρ_a = ψ_a ψ_a†. Dropping the ħ-coupling gives back the Ehrenfest ensemble.

use num_complex::Complex64;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hamiltonian::{ehrenfest_field_from, eval_h, real_expectation};
use crate::kernel::{self, KernelIntegralTable, KernelJTable, KernelSetup};
use crate::linalg::{self, c, CMatrix, CVector, I};
use crate::model::{ClosureState, HybridHamiltonian, ModelKind, PhasePoint, PureState, QuantumPart};

/// Largest tolerated Hermiticity defect of an effective generator.
pub const GENERATOR_HERMITICITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum QuantumDerivative {
    PerTrajectory(Vec<CVector>),
    Shared(CMatrix),
}

/// Time derivative of a [`ClosureState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
    pub quantum: QuantumDerivative,
}

impl StateDerivative {
    /// Index of the first trajectory with a non-finite component.
    pub fn first_non_finite(&self) -> Option<usize> {
        let n = self.dq.len();
        (0..n).find(|&a| {
            !self.dq[a].is_finite()
                || !self.dp[a].is_finite()
                || match &self.quantum {
                    QuantumDerivative::PerTrajectory(v) => v[a].iter().any(|z| !z.re.is_finite() || !z.im.is_finite()),
                    QuantumDerivative::Shared(m) => m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()),
                }
        })
    }

    /// Largest absolute component difference to another derivative of the same shape.
    pub fn max_difference(&self, other: &StateDerivative) -> f64 {
        let mut worst = 0.0_f64;
        for (x, y) in self.dq.iter().zip(&other.dq).chain(self.dp.iter().zip(&other.dp)) {
            worst = worst.max((x - y).abs());
        }
        match (&self.quantum, &other.quantum) {
            (QuantumDerivative::PerTrajectory(a), QuantumDerivative::PerTrajectory(b)) => {
                for (u, v) in a.iter().zip(b) {
                    worst = worst.max((u - v).camax());
                }
            }
            (QuantumDerivative::Shared(a), QuantumDerivative::Shared(b)) => worst = worst.max((a - b).camax()),
            _ => return f64::INFINITY,
        }
        worst
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        let classical = self.dq.iter().chain(&self.dp).fold(0.0_f64, |m, x| m.max(x.abs()));
        let quantum = match &self.quantum {
            QuantumDerivative::PerTrajectory(v) => v.iter().map(|x| x.camax()).fold(0.0, f64::max),
            QuantumDerivative::Shared(m) => m.camax(),
        };
        classical.max(quantum)
    }
}

/// Per-trajectory Hermitian generators G_a.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGenerator(pub Vec<CMatrix>);

/// Model kind, Hamiltonian and (for the regularized closure) the kernel quadrature.
#[derive(Debug, Clone)]
pub struct Closure {
    pub model: ModelKind,
    pub hamiltonian: HybridHamiltonian,
    pub kernel: Option<KernelSetup>,
    /// ħ-coupling between trajectories of the regularized closure.
    pub hbar_coupling: bool,
}

impl Closure {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let hamiltonian = cfg.hamiltonian()?;
        let kernel = if cfg.model == ModelKind::Regularized {
            Some(KernelSetup {
                mollifier: cfg.mollifier()?,
                grid: cfg.grid()?,
                options: cfg.kernel.clone(),
                parallel: !cfg.deterministic,
            })
        } else {
            None
        };
        Ok(Self {
            model: cfg.model,
            hamiltonian,
            kernel,
            hbar_coupling: cfg.coupling_hbar_terms,
        })
    }

    fn setup(&self) -> Result<&KernelSetup> {
        self.kernel
            .as_ref()
            .ok_or_else(|| Error::Config("regularized closure needs a mollifier and a grid".into()))
    }

    pub fn rhs(&self, state: &ClosureState) -> Result<StateDerivative> {
        match self.model {
            ModelKind::Ehrenfest => rhs_ehrenfest(state, &self.hamiltonian),
            ModelKind::Meanfield => rhs_meanfield(state, &self.hamiltonian),
            ModelKind::Regularized => rhs_regularized(state, &self.hamiltonian, self.setup()?, self.hbar_coupling),
        }
    }

    /// The conserved energy of the active closure.
    pub fn energy(&self, state: &ClosureState) -> Result<f64> {
        match self.model {
            ModelKind::Regularized if self.hbar_coupling => {
                let table = kernel::compute_i_for(state, &self.hamiltonian, self.setup()?)?;
                hamiltonian_h(state, &self.hamiltonian, Some(&table))
            }
            _ => hamiltonian_h(state, &self.hamiltonian, None),
        }
    }
}

/// Discrete Hamiltonian h of the closure state.
///
/// Without a table (or for a shared density matrix) this is the uncoupled
/// energy Σ_a w_a ⟨Ĥ_a⟩; with a table the ħ-coupling term is added.
pub fn hamiltonian_h(state: &ClosureState, h: &HybridHamiltonian, table: Option<&KernelIntegralTable>) -> Result<f64> {
    let w = state.weights.as_slice();
    match &state.quantum {
        QuantumPart::Shared(rho) => {
            let mut e = 0.0;
            for (z, wa) in state.points.iter().zip(w) {
                e += wa * linalg::trace_product_re(rho.matrix(), &eval_h(h, *z).value);
            }
            Ok(e)
        }
        QuantumPart::PerTrajectory(states) => {
            let mut e = 0.0;
            for ((z, wa), psi) in state.points.iter().zip(w).zip(states) {
                e += wa * real_expectation(psi, &eval_h(h, *z).value)?;
            }
            if let Some(table) = table {
                table.check_fresh(state)?;
                let rhos: Vec<CMatrix> = states.iter().map(PureState::projector).collect();
                let mut coupling = 0.0;
                for a in 0..states.len() {
                    for b in 0..states.len() {
                        if a == b {
                            continue;
                        }
                        let comm = linalg::commutator(&rhos[a], &rhos[b]) * I;
                        coupling += w[a] * w[b] * linalg::trace_product_re(&comm, table.get(a, b));
                    }
                }
                e += state.hbar * coupling;
            }
            Ok(e)
        }
    }
}

fn per_trajectory(state: &ClosureState) -> Result<&[PureState]> {
    state
        .states()
        .ok_or_else(|| Error::Invariant("closure needs per-trajectory quantum states".into()))
}

/// Ehrenfest ensemble: each trajectory follows ⟨X_Ĥ⟩ and its own Schrödinger equation.
pub fn rhs_ehrenfest(state: &ClosureState, h: &HybridHamiltonian) -> Result<StateDerivative> {
    let states = per_trajectory(state)?;
    let factor = Complex64::new(0.0, -1.0 / state.hbar);
    let mut dq = Vec::with_capacity(states.len());
    let mut dp = Vec::with_capacity(states.len());
    let mut dpsi = Vec::with_capacity(states.len());
    for (z, psi) in state.points.iter().zip(states) {
        let field = eval_h(h, *z);
        let (vq, vp) = ehrenfest_field_from(&field, psi)?;
        dq.push(vq);
        dp.push(vp);
        dpsi.push(&field.value * psi.vector() * factor);
    }
    Ok(StateDerivative {
        dq,
        dp,
        quantum: QuantumDerivative::PerTrajectory(dpsi),
    })
}

/// Mean-field closure: trajectories follow the vector field of Tr(ρ̂ Ĥ(z)),
/// and ρ̂ evolves under the weighted average Hamiltonian Σ_a w_a Ĥ_a.
pub fn rhs_meanfield(state: &ClosureState, h: &HybridHamiltonian) -> Result<StateDerivative> {
    let rho = match &state.quantum {
        QuantumPart::Shared(rho) => rho.matrix(),
        QuantumPart::PerTrajectory(_) => {
            return Err(Error::Invariant(
                "mean-field closure needs a shared density matrix".into(),
            ))
        }
    };
    let n = h.dim();
    let mut mean_h = CMatrix::zeros(n, n);
    let mut dq = Vec::with_capacity(state.n_trajectories());
    let mut dp = Vec::with_capacity(state.n_trajectories());
    for (z, w) in state.points.iter().zip(state.weights.as_slice()) {
        let field = eval_h(h, *z);
        dq.push(linalg::trace_product_re(rho, &field.dp));
        dp.push(-linalg::trace_product_re(rho, &field.dq));
        mean_h += field.value * c(*w);
    }
    let drho = linalg::commutator(&mean_h, rho) * Complex64::new(0.0, -1.0 / state.hbar);
    Ok(StateDerivative {
        dq,
        dp,
        quantum: QuantumDerivative::Shared(drho),
    })
}

/// Everything the regularized right-hand side needs from one kernel sweep.
struct CouplingTerms {
    /// I_ab over non-scalar Hamiltonian terms (row-major N×N).
    integrals: Vec<CMatrix>,
    /// (∂h_ħ/∂q_s, ∂h_ħ/∂p_s)
    gradient: Vec<(f64, f64)>,
}

fn coupling_terms(state: &ClosureState, h: &HybridHamiltonian, setup: &KernelSetup) -> Result<CouplingTerms> {
    let states = per_trajectory(state)?;
    let n = states.len();
    let w = state.weights.as_slice();
    // B_k ψ_a for every term and trajectory
    let applied: Vec<Vec<CVector>> = h
        .terms()
        .iter()
        .map(|t| states.iter().map(|psi| &t.matrix * psi.vector()).collect())
        .collect();
    let overlaps: Vec<Complex64> = (0..n * n)
        .map(|ab| states[ab / n].vector().dotc(states[ab % n].vector()))
        .collect();
    let hbar = state.hbar;
    // Tr(i[ρ_a, ρ_b] B) = −2 Im(⟨ψ_b|B ψ_a⟩⟨ψ_a|ψ_b⟩)
    let contract = |a: usize, b: usize, k: usize| {
        let x = states[b].vector().dotc(&applied[k][a]) * overlaps[a * n + b];
        hbar * w[a] * w[b] * (-2.0 * x.im)
    };
    let sweep = kernel::coupling_sweep(h, &state.points, &state.weights, setup, contract)?;
    Ok(CouplingTerms {
        integrals: sweep.integrals,
        gradient: sweep.gradient,
    })
}

fn generators_from(
    state: &ClosureState,
    h: &HybridHamiltonian,
    integrals: Option<&[CMatrix]>,
) -> Result<EffectiveGenerator> {
    let states = per_trajectory(state)?;
    let n = states.len();
    let w = state.weights.as_slice();
    let rhos: Vec<CMatrix> = states.iter().map(PureState::projector).collect();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut g = eval_h(h, state.points[a]).value;
        if let Some(int) = integrals {
            let dim = g.nrows();
            let mut acc = CMatrix::zeros(dim, dim);
            for b in 0..n {
                if a == b {
                    continue;
                }
                let anti = &int[a * n + b] - &int[b * n + a];
                acc += linalg::commutator(&rhos[b], &anti) * c(w[b]);
            }
            g += acc * (I * state.hbar);
        }
        let defect = linalg::hermiticity_defect(&g);
        if defect > GENERATOR_HERMITICITY_TOL {
            return Err(Error::Invariant(format!(
                "generator of trajectory {a} not Hermitian (defect {defect:e})"
            )));
        }
        out.push(g);
    }
    Ok(EffectiveGenerator(out))
}

/// G_a = Ĥ_a + iħ Σ_b w_b [ρ_b, I_ab − I_ba]; equals Ĥ_a when the coupling is off.
pub fn effective_generators(
    state: &ClosureState,
    h: &HybridHamiltonian,
    setup: &KernelSetup,
    coupling: bool,
) -> Result<EffectiveGenerator> {
    if !coupling {
        return generators_from(state, h, None);
    }
    let terms = coupling_terms(state, h, setup)?;
    generators_from(state, h, Some(&terms.integrals))
}

/// Gradient (∂h/∂q_a, ∂h/∂p_a) of the discrete Hamiltonian for every trajectory.
pub fn energy_gradient(
    state: &ClosureState,
    h: &HybridHamiltonian,
    setup: &KernelSetup,
    coupling: bool,
) -> Result<Vec<(f64, f64)>> {
    let states = per_trajectory(state)?;
    let w = state.weights.as_slice();
    let mut grad = Vec::with_capacity(states.len());
    for (a, psi) in states.iter().enumerate() {
        let field = eval_h(h, state.points[a]);
        grad.push((
            w[a] * real_expectation(psi, &field.dq)?,
            w[a] * real_expectation(psi, &field.dp)?,
        ));
    }
    if coupling {
        let terms = coupling_terms(state, h, setup)?;
        for (g, extra) in grad.iter_mut().zip(&terms.gradient) {
            g.0 += extra.0;
            g.1 += extra.1;
        }
    }
    Ok(grad)
}

/// Regularized variational closure; with `coupling` off this is exactly [`rhs_ehrenfest`].
pub fn rhs_regularized(
    state: &ClosureState,
    h: &HybridHamiltonian,
    setup: &KernelSetup,
    coupling: bool,
) -> Result<StateDerivative> {
    setup.check_margin(&state.points)?;
    let mut out = rhs_ehrenfest(state, h)?;
    if !coupling {
        return Ok(out);
    }
    let terms = coupling_terms(state, h, setup)?;
    let w = state.weights.as_slice();
    for (a, (gq, gp)) in terms.gradient.iter().enumerate() {
        out.dq[a] += gp / w[a];
        out.dp[a] -= gq / w[a];
    }
    let gens = generators_from(state, h, Some(&terms.integrals))?;
    let states = per_trajectory(state)?;
    let factor = Complex64::new(0.0, -1.0 / state.hbar);
    out.quantum = QuantumDerivative::PerTrajectory(
        gens.0
            .iter()
            .zip(states)
            .map(|(g, psi)| g * psi.vector() * factor)
            .collect(),
    );
    Ok(out)
}

/// Hybrid von Neumann operator: point masses w_a ρ_a at ζ_a plus the smooth
/// part iħ Σ_ab w_a w_b J_ab(z) [ρ_a, ρ_b] at each requested sample.
#[derive(Debug, Clone)]
pub struct HybridOperatorField {
    pub point_masses: Vec<(PhasePoint, CMatrix)>,
    pub samples: Vec<PhasePoint>,
    pub smooth: Vec<CMatrix>,
}

/// i[ρ_a, ρ_b] for all pairs (row-major).
fn pair_commutators(states: &[PureState]) -> Vec<CMatrix> {
    let rhos: Vec<CMatrix> = states.iter().map(PureState::projector).collect();
    let n = rhos.len();
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            out.push(linalg::commutator(&rhos[a], &rhos[b]) * I);
        }
    }
    out
}

fn combine_smooth(state: &ClosureState, comms: &[CMatrix], j_of: impl Fn(usize, usize) -> f64) -> Result<CMatrix> {
    let n = state.n_trajectories();
    let w = state.weights.as_slice();
    let dim = state.dim();
    let mut m = CMatrix::zeros(dim, dim);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let j = j_of(a, b);
            if j != 0.0 {
                m += &comms[a * n + b] * c(state.hbar * w[a] * w[b] * j);
            }
        }
    }
    let defect = linalg::hermiticity_defect(&m);
    if defect > 1e-10 {
        return Err(Error::Invariant(format!(
            "hybrid operator not Hermitian (defect {defect:e})"
        )));
    }
    Ok(m)
}

pub fn hybrid_operator_field(
    state: &ClosureState,
    table: &KernelJTable,
    samples: &[PhasePoint],
) -> Result<HybridOperatorField> {
    let states = per_trajectory(state)?;
    if table.stamp() != state.stamp() {
        return Err(Error::Stale {
            table: table.stamp().0,
            state: state.stamp().0,
        });
    }
    let n = states.len();
    let comms = pair_commutators(states);
    let mut smooth = Vec::with_capacity(samples.len());
    for z in samples {
        let j = table.evaluate_at(*z)?;
        smooth.push(combine_smooth(state, &comms, |a, b| j[a * n + b])?);
    }
    let point_masses = state
        .points
        .iter()
        .zip(states)
        .zip(state.weights.as_slice())
        .map(|((z, psi), w)| (*z, psi.projector() * c(*w)))
        .collect();
    Ok(HybridOperatorField {
        point_masses,
        samples: samples.to_vec(),
        smooth,
    })
}

/// Smooth part of the hybrid operator at every grid node of the table.
pub fn smooth_part_on_grid(state: &ClosureState, table: &KernelJTable) -> Result<Vec<CMatrix>> {
    let states = per_trajectory(state)?;
    let comms = pair_commutators(states);
    (0..table.n_nodes())
        .map(|node| combine_smooth(state, &comms, |a, b| table.value(a, b, node)))
        .collect()
}

/// Box integral Σ_nodes wt · (smooth part), using the tabulated J_ab integrals.
pub fn integrated_smooth_part(state: &ClosureState, table: &KernelJTable) -> Result<CMatrix> {
    let states = per_trajectory(state)?;
    let comms = pair_commutators(states);
    combine_smooth(state, &comms, |a, b| table.integral(a, b))
}
