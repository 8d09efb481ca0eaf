// SPDX-License-Identifier: Apache-2.0

//! Trajectory-based closures of mixed quantum-classical dynamics.
//!
//! Three closures share one state representation ([`ClosureState`]): the
//! Ehrenfest trajectory ensemble, the mean-field model with a single shared
//! density matrix, and a kernel-regularized variational closure in which every
//! trajectory couples to all others through Gaussian-mollified phase-space
//! integrals. The [`diagnostics`] module measures the conserved quantities and
//! the ensemble purity along a run.

pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod integrate;
pub mod kernel;
pub mod linalg;
pub mod model;

pub use config::RunConfig;
pub use diagnostics::{purity, DiagnosticsRecord};
pub use dynamics::{Closure, StateDerivative};
pub use error::{Error, Result};
pub use hamiltonian::{ehrenfest_field, eval_h, OperatorField};
pub use integrate::{integrate, step_rk4, RunOutput, TrajectoryRecord};
pub use kernel::{compute_di, compute_i, compute_j, KernelSetup, Mollifier, QuadratureGrid};
pub use linalg::CMatrix;
pub use model::{
    build_state, density_matrix, ClosureState, DensityMatrix, HybridHamiltonian, ModelKind, PhasePoint, PureState,
    QuantumPart, Weights,
};
