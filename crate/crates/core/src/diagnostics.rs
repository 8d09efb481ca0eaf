// SPDX-License-Identifier: Apache-2.0

//! Per-record scalars: energy, ensemble and per-trajectory purity, norms,
//! and the smallest eigenvalue of ρ̂. Also the CSV row format of `run.csv`.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{self, Closure};
use crate::error::Result;
use crate::kernel;
use crate::linalg::{self, CMatrix};
use crate::model::{density_matrix, ClosureState, DensityMatrix, ModelKind, PhasePoint, QuantumPart};

/// Tr(ρ̂²) = Σ_ij |ρ_ij|² for Hermitian ρ̂.
pub fn purity(rho: &DensityMatrix) -> f64 {
    matrix_purity(rho.matrix())
}

fn matrix_purity(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub t: f64,
    /// Conserved energy of the active closure.
    pub energy: f64,
    /// Ensemble purity Tr(ρ̂²).
    pub purity: f64,
    pub min_eigenvalue: f64,
    pub points: Vec<PhasePoint>,
    /// |ψ_a|; empty for the mean-field closure.
    pub norms: Vec<f64>,
    /// Tr(ρ_a²); empty for the mean-field closure.
    pub trajectory_purities: Vec<f64>,
    /// Largest post-step renormalization correction since the previous record.
    pub renorm_correction: f64,
    /// max_ab ‖I_ab‖_F (regularized closure only).
    pub table_norm: Option<f64>,
    /// Smooth part of the hybrid operator at the configured sample points.
    #[serde(skip)]
    pub operator_samples: Option<Vec<CMatrix>>,
}

impl DiagnosticsRecord {
    pub fn max_norm_deviation(&self) -> f64 {
        self.norms.iter().fold(0.0, |m, x| m.max((x - 1.0).abs()))
    }

    pub fn max_trajectory_purity_deviation(&self) -> f64 {
        self.trajectory_purities.iter().fold(0.0, |m, x| m.max((x - 1.0).abs()))
    }
}

/// Assembles a record for `state` at time `t`.
pub fn record(
    state: &ClosureState,
    closure: &Closure,
    step: usize,
    t: f64,
    renorm_correction: f64,
    samples: &[PhasePoint],
) -> Result<DiagnosticsRecord> {
    let rho = density_matrix(state);
    let min_eigenvalue = linalg::hermitian_eigenvalues(rho.matrix())[0];
    let (norms, trajectory_purities) = match &state.quantum {
        QuantumPart::PerTrajectory(states) => (
            states.iter().map(|s| s.norm()).collect(),
            states.iter().map(|s| matrix_purity(&s.projector())).collect(),
        ),
        QuantumPart::Shared(_) => (Vec::new(), Vec::new()),
    };
    let mut table_norm = None;
    let mut operator_samples = None;
    let energy = match (&closure.kernel, closure.model) {
        (Some(setup), ModelKind::Regularized) => {
            let table = kernel::compute_i_for(state, &closure.hamiltonian, setup)?;
            table_norm = Some(table.max_norm());
            if !samples.is_empty() {
                let j = kernel::compute_j(&state.points, &state.weights, setup)?;
                operator_samples = Some(dynamics::hybrid_operator_field(state, &j, samples)?.smooth);
            }
            let coupling = closure.hbar_coupling.then_some(&table);
            dynamics::hamiltonian_h(state, &closure.hamiltonian, coupling)?
        }
        _ => dynamics::hamiltonian_h(state, &closure.hamiltonian, None)?,
    };
    Ok(DiagnosticsRecord {
        step,
        t,
        energy,
        purity: purity(&rho),
        min_eigenvalue,
        points: state.points.clone(),
        norms,
        trajectory_purities,
        renorm_correction,
        table_norm,
        operator_samples,
    })
}

/// Writes `run.csv` rows. The column layout depends only on the model kind and N.
pub struct CsvWriter<W: Write> {
    out: W,
    n_traj: usize,
    per_trajectory: bool,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, n_traj: usize, model: ModelKind) -> std::io::Result<Self> {
        let per_trajectory = !model.uses_shared_density();
        let mut cols: Vec<String> = [
            "step",
            "t",
            "energy",
            "purity",
            "min_eigenvalue",
            "max_norm_deviation",
            "max_trajectory_purity_deviation",
            "renorm_correction",
            "i_table_norm",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((0..n_traj).map(|a| format!("q_{a}")));
        cols.extend((0..n_traj).map(|a| format!("p_{a}")));
        if per_trajectory {
            cols.extend((0..n_traj).map(|a| format!("norm_{a}")));
            cols.extend((0..n_traj).map(|a| format!("trajectory_purity_{a}")));
        }
        writeln!(out, "{}", cols.join(","))?;
        Ok(Self {
            out,
            n_traj,
            per_trajectory,
        })
    }

    pub fn write(&mut self, r: &DiagnosticsRecord) -> std::io::Result<()> {
        debug_assert_eq!(r.points.len(), self.n_traj);
        let mut fields = vec![
            r.step.to_string(),
            r.t.to_string(),
            r.energy.to_string(),
            r.purity.to_string(),
            r.min_eigenvalue.to_string(),
            r.max_norm_deviation().to_string(),
            r.max_trajectory_purity_deviation().to_string(),
            r.renorm_correction.to_string(),
            r.table_norm.map(|x| x.to_string()).unwrap_or_default(),
        ];
        fields.extend(r.points.iter().map(|z| z.q.to_string()));
        fields.extend(r.points.iter().map(|z| z.p.to_string()));
        if self.per_trajectory {
            fields.extend(r.norms.iter().map(|x| x.to_string()));
            fields.extend(r.trajectory_purities.iter().map(|x| x.to_string()));
        }
        writeln!(self.out, "{}", fields.join(","))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;

    #[test]
    fn purity_of_pure_projector() {
        let rho = DensityMatrix::new(CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)])).unwrap();
        assert_eq!(purity(&rho), 1.0);
    }

    #[test]
    fn purity_of_maximally_mixed_qubit() {
        let rho = DensityMatrix::new(CMatrix::identity(2, 2) * c(0.5)).unwrap();
        assert_eq!(purity(&rho), 0.5);
    }

    #[test]
    fn purity_of_partially_mixed_state() {
        // (9 + 1 + 1 + 1) / 16
        let rho = DensityMatrix::new(CMatrix::from_row_slice(2, 2, &[c(0.75), c(0.25), c(0.25), c(0.25)])).unwrap();
        assert!((purity(&rho) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn csv_header_is_stable() {
        let w = CsvWriter::new(Vec::new(), 2, ModelKind::Ehrenfest).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(
            text.trim_end(),
            "step,t,energy,purity,min_eigenvalue,max_norm_deviation,max_trajectory_purity_deviation,\
renorm_correction,i_table_norm,q_0,q_1,p_0,p_1,norm_0,norm_1,trajectory_purity_0,trajectory_purity_1"
        );
        let w = CsvWriter::new(Vec::new(), 1, ModelKind::Meanfield).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert!(text.trim_end().ends_with("i_table_norm,q_0,p_0"));
    }
}
