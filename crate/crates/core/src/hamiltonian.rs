// SPDX-License-Identifier: Apache-2.0

//! Evaluation of Ĥ(z) and its phase-space gradient from the polynomial form.

use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix};
use crate::model::{HybridHamiltonian, PhasePoint, PureState};

/// Imaginary parts of expectation values above this are treated as a Hermiticity failure.
pub const EXPECTATION_IM_TOL: f64 = 1e-9;

/// Ĥ(z) together with ∂_q Ĥ(z) and ∂_p Ĥ(z).
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorField {
    pub value: CMatrix,
    pub dq: CMatrix,
    pub dp: CMatrix,
}

/// x^k with the convention 0^0 = 1; negative k yields 0 (derivative of a constant).
#[inline]
pub(crate) fn ipow(x: f64, k: i64) -> f64 {
    if k < 0 {
        0.0
    } else {
        x.powi(k as i32)
    }
}

/// Scalar factor of a monomial and its two partial derivatives at z.
#[inline]
pub(crate) fn monomial_with_gradient(coef: f64, m: u32, n: u32, z: PhasePoint) -> (f64, f64, f64) {
    let (m, n) = (m as i64, n as i64);
    let value = coef * ipow(z.q, m) * ipow(z.p, n);
    let dq = if m == 0 {
        0.0
    } else {
        coef * m as f64 * ipow(z.q, m - 1) * ipow(z.p, n)
    };
    let dp = if n == 0 {
        0.0
    } else {
        coef * n as f64 * ipow(z.q, m) * ipow(z.p, n - 1)
    };
    (value, dq, dp)
}

pub fn eval_h(h: &HybridHamiltonian, z: PhasePoint) -> OperatorField {
    let n = h.dim();
    let mut value = CMatrix::zeros(n, n);
    let mut dq = CMatrix::zeros(n, n);
    let mut dp = CMatrix::zeros(n, n);
    for t in h.terms() {
        let (v, gq, gp) = monomial_with_gradient(t.coefficient, t.q_power, t.p_power, z);
        if v != 0.0 {
            value += &t.matrix * c(v);
        }
        if gq != 0.0 {
            dq += &t.matrix * c(gq);
        }
        if gp != 0.0 {
            dp += &t.matrix * c(gp);
        }
    }
    OperatorField { value, dq, dp }
}

/// ⟨ψ|A|ψ⟩ for Hermitian A, checked to be real.
pub fn real_expectation(psi: &PureState, a: &CMatrix) -> Result<f64> {
    let v = psi.vector();
    let e = v.dotc(&(a * v));
    if e.im.abs() > EXPECTATION_IM_TOL * e.re.abs().max(1.0) {
        return Err(Error::Invariant(format!(
            "expectation value has imaginary part {:e}",
            e.im
        )));
    }
    Ok(e.re)
}

/// Ehrenfest velocity (q̇, ṗ) = (⟨∂_p Ĥ⟩, −⟨∂_q Ĥ⟩) at z for the state ψ.
pub fn ehrenfest_field(h: &HybridHamiltonian, z: PhasePoint, psi: &PureState) -> Result<(f64, f64)> {
    let field = eval_h(h, z);
    ehrenfest_field_from(&field, psi)
}

pub(crate) fn ehrenfest_field_from(field: &OperatorField, psi: &PureState) -> Result<(f64, f64)> {
    Ok((real_expectation(psi, &field.dp)?, -real_expectation(psi, &field.dq)?))
}
