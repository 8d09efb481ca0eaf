// SPDX-License-Identifier: Apache-2.0

//! Domain types shared by all closures: phase points, quantum states, weights,
//! the operator-valued Hamiltonian and the ensemble state itself.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use nalgebra::{Cholesky, Matrix2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix, CVector};

pub const NORM_TOL: f64 = 1e-9;
pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-9;
pub const EIGEN_TOL: f64 = 1e-10;
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A point ζ = (q, p) of the two-dimensional classical phase space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: f64,
    pub p: f64,
}

impl PhasePoint {
    pub fn new(q: f64, p: f64) -> Result<Self> {
        if !(q.is_finite() && p.is_finite()) {
            return Err(Error::Invariant(format!("non-finite phase point ({q}, {p})")));
        }
        Ok(Self { q, p })
    }

    pub fn distance(&self, other: &PhasePoint) -> f64 {
        (self.q - other.q).hypot(self.p - other.p)
    }
}

impl fmt::Display for PhasePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.q, self.p)
    }
}

/// Normalized state vector ψ ∈ ℂⁿ. The projector ψψ† is derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    psi: CVector,
}

impl PureState {
    pub fn new(psi: CVector) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::Invariant("empty state vector".into()));
        }
        let norm = psi.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Invariant(format!("state norm {norm} is not 1")));
        }
        Ok(Self { psi })
    }

    /// Rescales `psi` to unit norm.
    pub fn normalized(psi: CVector) -> Result<Self> {
        let norm = psi.norm();
        if psi.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(Error::Invariant("cannot normalize a zero or empty state".into()));
        }
        Ok(Self { psi: psi.unscale(norm) })
    }

    /// Intermediate Runge-Kutta stages are not exactly normalized.
    pub(crate) fn from_raw(psi: CVector) -> Self {
        Self { psi }
    }

    pub fn from_slice(amplitudes: &[Complex64]) -> Result<Self> {
        Self::new(CVector::from_column_slice(amplitudes))
    }

    pub fn vector(&self) -> &CVector {
        &self.psi
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn norm(&self) -> f64 {
        self.psi.norm()
    }

    pub fn projector(&self) -> CMatrix {
        linalg::outer(&self.psi)
    }

    /// Renormalizes in place and returns the size of the correction |1 - |ψ||.
    pub(crate) fn renormalize(&mut self) -> f64 {
        let norm = self.psi.norm();
        self.psi.unscale_mut(norm);
        (1.0 - norm).abs()
    }
}

/// Hermitian, unit-trace, positive semidefinite n×n matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: CMatrix,
}

impl DensityMatrix {
    pub fn new(rho: CMatrix) -> Result<Self> {
        if !rho.is_square() || rho.nrows() == 0 {
            return Err(Error::Invariant("density matrix must be square and non-empty".into()));
        }
        let defect = linalg::hermiticity_defect(&rho);
        if defect > HERMITIAN_TOL {
            return Err(Error::Invariant(format!(
                "density matrix not Hermitian (defect {defect:e})"
            )));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::Invariant(format!("density matrix trace {tr} is not 1")));
        }
        let min_eig = linalg::hermitian_eigenvalues(&rho)[0];
        if min_eig < -EIGEN_TOL {
            return Err(Error::Invariant(format!("density matrix has eigenvalue {min_eig:e}")));
        }
        Ok(Self { rho })
    }

    pub fn from_pure(psi: &PureState) -> Self {
        Self { rho: psi.projector() }
    }

    pub(crate) fn from_raw(rho: CMatrix) -> Self {
        Self { rho }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::hermitian_eigenvalues(&self.rho)
    }

    /// Replaces ρ by its Hermitian part, returning the removed defect.
    pub(crate) fn hermitize(&mut self) -> f64 {
        let defect = linalg::hermiticity_defect(&self.rho);
        self.rho = linalg::hermitian_part(&self.rho);
        defect
    }
}

/// Positive trajectory weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Invariant("no weights".into()));
        }
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::Invariant(format!("weight {bad} is not positive")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invariant(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invariant("no weights".into()));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Accepts arbitrary positive weights and divides by their sum.
    pub fn normalized(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::Config(format!("weight {bad} is not positive")));
        }
        let sum: f64 = w.iter().sum();
        Self::new(w.into_iter().map(|x| x / sum).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for Weights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantumPart {
    /// One pure state per trajectory (Ehrenfest and regularized closures).
    PerTrajectory(Vec<PureState>),
    /// A single z-independent density matrix (mean-field closure).
    Shared(DensityMatrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ehrenfest,
    #[serde(alias = "mean-field", alias = "mean_field")]
    Meanfield,
    Regularized,
}

impl ModelKind {
    pub fn uses_shared_density(self) -> bool {
        matches!(self, ModelKind::Meanfield)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ehrenfest => "ehrenfest",
            ModelKind::Meanfield => "meanfield",
            ModelKind::Regularized => "regularized",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ehrenfest" => Ok(ModelKind::Ehrenfest),
            "meanfield" | "mean-field" | "mean_field" => Ok(ModelKind::Meanfield),
            "regularized" => Ok(ModelKind::Regularized),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

/// Identifies the classical configuration (points and weights) a kernel table was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateStamp(pub u64);

/// N weighted phase-space points with their quantum data, plus ħ.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureState {
    pub points: Vec<PhasePoint>,
    pub weights: Weights,
    pub quantum: QuantumPart,
    pub hbar: f64,
}

impl ClosureState {
    pub fn new(points: Vec<PhasePoint>, weights: Weights, quantum: QuantumPart, hbar: f64) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::Invariant(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(Error::Invariant(format!("hbar = {hbar} must be positive")));
        }
        match &quantum {
            QuantumPart::PerTrajectory(states) => {
                if states.len() != points.len() {
                    return Err(Error::Invariant(format!(
                        "{} points but {} quantum states",
                        points.len(),
                        states.len()
                    )));
                }
                let n = states[0].dim();
                if states.iter().any(|s| s.dim() != n) {
                    return Err(Error::Invariant("quantum states differ in dimension".into()));
                }
            }
            QuantumPart::Shared(_) => {}
        }
        Ok(Self {
            points,
            weights,
            quantum,
            hbar,
        })
    }

    pub fn n_trajectories(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        match &self.quantum {
            QuantumPart::PerTrajectory(s) => s[0].dim(),
            QuantumPart::Shared(rho) => rho.dim(),
        }
    }

    pub fn states(&self) -> Option<&[PureState]> {
        match &self.quantum {
            QuantumPart::PerTrajectory(s) => Some(s),
            QuantumPart::Shared(_) => None,
        }
    }

    pub fn check_variant(&self, model: ModelKind) -> Result<()> {
        let shared = matches!(self.quantum, QuantumPart::Shared(_));
        if shared != model.uses_shared_density() {
            return Err(Error::Invariant(format!(
                "{} model needs {} quantum data",
                model.name(),
                if model.uses_shared_density() {
                    "shared"
                } else {
                    "per-trajectory"
                }
            )));
        }
        Ok(())
    }

    pub fn stamp(&self) -> StateStamp {
        stamp_of(&self.points, &self.weights)
    }
}

/// Hash of the exact bit patterns of the points and weights.
pub(crate) fn stamp_of(points: &[PhasePoint], weights: &Weights) -> StateStamp {
    let mut h = DefaultHasher::new();
    for (z, w) in points.iter().zip(weights.as_slice()) {
        z.q.to_bits().hash(&mut h);
        z.p.to_bits().hash(&mut h);
        w.to_bits().hash(&mut h);
    }
    StateStamp(h.finish())
}

/// Ensemble density matrix ρ̂ = Σ_a w_a ψ_a ψ_a†; the shared variant returns its stored ρ̂.
pub fn density_matrix(state: &ClosureState) -> DensityMatrix {
    match &state.quantum {
        QuantumPart::Shared(rho) => rho.clone(),
        QuantumPart::PerTrajectory(states) => {
            let n = states[0].dim();
            let mut rho = CMatrix::zeros(n, n);
            for (psi, w) in states.iter().zip(state.weights.as_slice()) {
                let v = psi.vector();
                for i in 0..n {
                    for j in 0..n {
                        rho[(i, j)] += v[i] * v[j].conj() * *w;
                    }
                }
            }
            DensityMatrix::from_raw(rho)
        }
    }
}

/// One polynomial term c · q^m · p^k · B of the hybrid Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianTerm {
    pub coefficient: f64,
    pub q_power: u32,
    pub p_power: u32,
    pub matrix: CMatrix,
}

impl HamiltonianTerm {
    pub fn new(coefficient: f64, q_power: u32, p_power: u32, matrix: CMatrix) -> Self {
        Self {
            coefficient,
            q_power,
            p_power,
            matrix,
        }
    }

    /// True when the matrix is a multiple of the identity.
    pub fn is_scalar(&self) -> bool {
        let n = self.matrix.nrows();
        let d = self.matrix[(0, 0)];
        (0..n).all(|i| {
            (0..n).all(|j| {
                if i == j {
                    self.matrix[(i, j)] == d
                } else {
                    self.matrix[(i, j)] == Complex64::new(0.0, 0.0)
                }
            })
        })
    }

    /// True when the term has no phase-space dependence.
    pub fn is_constant(&self) -> bool {
        self.q_power == 0 && self.p_power == 0
    }
}

/// Operator-valued polynomial Ĥ(q, p) = Σ_k c_k q^{m_k} p^{n_k} B_k with Hermitian B_k.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridHamiltonian {
    terms: Vec<HamiltonianTerm>,
    dim: usize,
}

impl HybridHamiltonian {
    pub fn new(terms: Vec<HamiltonianTerm>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Config("hamiltonian needs at least one term".into()))?;
        let dim = first.matrix.nrows();
        if dim == 0 {
            return Err(Error::Config("hamiltonian matrices must be non-empty".into()));
        }
        let mut clean = Vec::with_capacity(terms.len());
        for (k, t) in terms.into_iter().enumerate() {
            if t.matrix.nrows() != dim || t.matrix.ncols() != dim {
                return Err(Error::Config(format!("term {k}: matrix is not {dim}x{dim}")));
            }
            if !t.coefficient.is_finite() {
                return Err(Error::Config(format!("term {k}: non-finite coefficient")));
            }
            let defect = linalg::hermiticity_defect(&t.matrix);
            if defect > HERMITIAN_TOL {
                return Err(Error::Config(format!(
                    "term {k}: matrix not Hermitian (defect {defect:e})"
                )));
            }
            // Store the exactly Hermitian part.
            let matrix = if defect == 0.0 {
                t.matrix
            } else {
                linalg::hermitian_part(&t.matrix)
            };
            clean.push(HamiltonianTerm { matrix, ..t });
        }
        Ok(Self { terms: clean, dim })
    }

    pub fn terms(&self) -> &[HamiltonianTerm] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ĥ'(z) = Ĥ(z - shift), expanded back into monomials.
    pub fn shifted(&self, shift: PhasePoint) -> Self {
        let mut terms = Vec::new();
        for t in &self.terms {
            for i in 0..=t.q_power {
                for j in 0..=t.p_power {
                    let coef = t.coefficient
                        * binomial(t.q_power, i) as f64
                        * binomial(t.p_power, j) as f64
                        * (-shift.q).powi((t.q_power - i) as i32)
                        * (-shift.p).powi((t.p_power - j) as i32);
                    if coef != 0.0 {
                        terms.push(HamiltonianTerm::new(coef, i, j, t.matrix.clone()));
                    }
                }
            }
        }
        Self { terms, dim: self.dim }
    }

    /// (ω/2)(p² + q²)·1 + κ q σ_z + Δ σ_x on a two-level system.
    pub fn spin_boson(omega: f64, kappa: f64, delta: f64) -> Self {
        let id = CMatrix::identity(2, 2);
        let terms = vec![
            HamiltonianTerm::new(0.5 * omega, 0, 2, id.clone()),
            HamiltonianTerm::new(0.5 * omega, 2, 0, id),
            HamiltonianTerm::new(kappa, 1, 0, pauli_z()),
            HamiltonianTerm::new(delta, 0, 0, pauli_x()),
        ];
        Self { terms, dim: 2 }
    }
}

fn binomial(n: u32, k: u32) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(
        2,
        2,
        &[c(0.0), Complex64::new(0.0, -1.0), Complex64::new(0.0, 1.0), c(0.0)],
    )
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)])
}

/// Samples the initial ensemble described by `config`.
///
/// Points are drawn from the configured classical Gaussian with a ChaCha8 stream
/// seeded from `config.seed`; the same config always yields the same state.
pub fn build_state(config: &RunConfig) -> Result<ClosureState> {
    config.validate()?;
    let ens = &config.ensemble;
    let n_traj = ens.n_trajectories;

    let cov = Matrix2::new(
        ens.covariance[0][0],
        ens.covariance[0][1],
        ens.covariance[1][0],
        ens.covariance[1][1],
    );
    let factor = gaussian_factor(&cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut points = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let x: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = StandardNormal.sample(&mut rng);
        let q = ens.mean[0] + factor[(0, 0)] * x;
        let p = ens.mean[1] + factor[(1, 0)] * x + factor[(1, 1)] * y;
        points.push(PhasePoint::new(q, p)?);
    }

    let weights = match &ens.weights {
        Some(w) => Weights::normalized(w.clone())?,
        None => Weights::uniform(n_traj)?,
    };

    let states = config.initial_states()?;
    let quantum = if config.model.uses_shared_density() {
        let per = ClosureState::new(
            points.clone(),
            weights.clone(),
            QuantumPart::PerTrajectory(states),
            config.hbar,
        )?;
        QuantumPart::Shared(density_matrix(&per))
    } else {
        QuantumPart::PerTrajectory(states)
    };
    ClosureState::new(points, weights, quantum, config.hbar)
}

/// Lower-triangular L with L Lᵀ = cov; accepts semidefinite (including zero) covariances.
fn gaussian_factor(cov: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("covariance has non-finite entries".into()));
    }
    if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::Config("covariance is not symmetric".into()));
    }
    if cov[(0, 0)] < 0.0 || cov[(1, 1)] < 0.0 || cov.determinant() < -1e-14 {
        return Err(Error::Config("covariance is not positive semidefinite".into()));
    }
    if let Some(ch) = Cholesky::new(*cov) {
        return Ok(ch.l());
    }
    // Singular case.
    let l00 = cov[(0, 0)].sqrt();
    let l10 = if l00 > 0.0 { cov[(1, 0)] / l00 } else { 0.0 };
    let l11 = (cov[(1, 1)] - l10 * l10).max(0.0).sqrt();
    if l00 == 0.0 && cov[(1, 0)] != 0.0 {
        return Err(Error::Config("covariance is not positive semidefinite".into()));
    }
    Ok(Matrix2::new(l00, 0.0, l10, l11))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cv(v: &[(f64, f64)]) -> CVector {
        CVector::from_iterator(v.len(), v.iter().map(|&(r, i)| Complex64::new(r, i)))
    }

    fn per_traj(points: Vec<PhasePoint>, w: Vec<f64>, states: Vec<PureState>) -> ClosureState {
        ClosureState::new(
            points,
            Weights::new(w).unwrap(),
            QuantumPart::PerTrajectory(states),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn phase_point_rejects_nan() {
        assert!(PhasePoint::new(f64::NAN, 0.0).is_err());
        assert!(PhasePoint::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn pure_state_norm_checked() {
        assert!(PureState::new(cv(&[(1.0, 0.0), (1.0, 0.0)])).is_err());
        assert!(PureState::new(CVector::zeros(0)).is_err());
        let s = PureState::normalized(cv(&[(1.0, 0.0), (1.0, 0.0)])).unwrap();
        assert_relative_eq!(s.norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_checked() {
        assert!(Weights::new(vec![0.5, 0.6]).is_err());
        assert!(Weights::new(vec![1.5, -0.5]).is_err());
        let w = Weights::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn density_of_single_pure_state() {
        let s = per_traj(
            vec![PhasePoint::new(0.0, 0.0).unwrap()],
            vec![1.0],
            vec![PureState::new(cv(&[(1.0, 0.0), (0.0, 0.0)])).unwrap()],
        );
        let rho = density_matrix(&s);
        let expected = CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]);
        assert_eq!(rho.matrix(), &expected);
    }

    #[test]
    fn density_of_orthogonal_mixture() {
        let z = PhasePoint::new(0.0, 0.0).unwrap();
        let s = per_traj(
            vec![z, z],
            vec![0.5, 0.5],
            vec![
                PureState::new(cv(&[(1.0, 0.0), (0.0, 0.0)])).unwrap(),
                PureState::new(cv(&[(0.0, 0.0), (1.0, 0.0)])).unwrap(),
            ],
        );
        let rho = density_matrix(&s);
        assert!((rho.matrix() - CMatrix::identity(2, 2) * c(0.5)).camax() < 1e-15);
    }

    #[test]
    fn density_of_non_orthogonal_mixture() {
        // ½|0⟩⟨0| + ½|+⟩⟨+| = [[3/4, 1/4], [1/4, 1/4]]
        let z = PhasePoint::new(0.0, 0.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = per_traj(
            vec![z, z],
            vec![0.5, 0.5],
            vec![
                PureState::new(cv(&[(1.0, 0.0), (0.0, 0.0)])).unwrap(),
                PureState::new(cv(&[(h, 0.0), (h, 0.0)])).unwrap(),
            ],
        );
        let rho = density_matrix(&s);
        let expected = CMatrix::from_row_slice(2, 2, &[c(0.75), c(0.25), c(0.25), c(0.25)]);
        assert!((rho.matrix() - expected).camax() < 1e-15);
        assert!(DensityMatrix::new(rho.matrix().clone()).is_ok());
    }

    #[test]
    fn density_matrix_validation() {
        let not_hermitian = CMatrix::from_row_slice(2, 2, &[c(0.5), c(0.1), c(0.0), c(0.5)]);
        assert!(DensityMatrix::new(not_hermitian).is_err());
        let bad_trace = CMatrix::identity(2, 2);
        assert!(DensityMatrix::new(bad_trace).is_err());
        let negative = CMatrix::from_row_slice(2, 2, &[c(1.5), c(0.0), c(0.0), c(-0.5)]);
        assert!(DensityMatrix::new(negative).is_err());
    }

    #[test]
    fn variant_mismatch_detected() {
        let s = per_traj(
            vec![PhasePoint::new(0.0, 0.0).unwrap()],
            vec![1.0],
            vec![PureState::new(cv(&[(1.0, 0.0)])).unwrap()],
        );
        assert!(s.check_variant(ModelKind::Ehrenfest).is_ok());
        assert!(s.check_variant(ModelKind::Meanfield).is_err());
    }

    #[test]
    fn hamiltonian_rejects_non_hermitian_term() {
        let m = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        assert!(HybridHamiltonian::new(vec![HamiltonianTerm::new(1.0, 0, 0, m)]).is_err());
        assert!(HybridHamiltonian::new(vec![]).is_err());
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 3), 1);
    }

    #[test]
    fn scalar_term_detection() {
        let h = HybridHamiltonian::spin_boson(1.0, 0.1, 0.5);
        let flags: Vec<bool> = h.terms().iter().map(|t| t.is_scalar()).collect();
        assert_eq!(flags, vec![true, true, false, false]);
    }

    #[test]
    fn stamp_tracks_points() {
        let mk = |q| {
            per_traj(
                vec![PhasePoint::new(q, 0.0).unwrap()],
                vec![1.0],
                vec![PureState::new(cv(&[(1.0, 0.0)])).unwrap()],
            )
        };
        assert_eq!(mk(0.0).stamp(), mk(0.0).stamp());
        assert_ne!(mk(0.0).stamp(), mk(1e-15).stamp());
    }
}
