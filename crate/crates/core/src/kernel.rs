// SPDX-License-Identifier: Apache-2.0

//! Gaussian mollifier, the fixed phase-space quadrature grid, and the kernel
//! integrals that couple trajectories in the regularized closure:
//!
//! ```text
//! I_ab = ½ ∫ K_a {K_b, Ĥ} / S dz        S = Σ_c w_c K_c,  K_s = K(z − ζ_s)
//! J_ab = ¼ ({K_a, K_b/S} − {K_b, K_a/S})
//! ```
//!
//! All integrals use the midpoint rule on a grid whose nodes do not move with
//! the trajectories, so the discrete integrals are smooth functions of the
//! centers and can be differentiated exactly.
//!
//! Because Ĥ is a sum of terms f_k(z) B_k, every I_ab is stored as scalar
//! coefficients s_abk with I_ab = Σ_k s_abk B_k.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::KernelOptions;
use crate::error::{Error, Result};
use crate::hamiltonian::monomial_with_gradient;
use crate::linalg::{self, c, CMatrix};
use crate::model::{stamp_of, ClosureState, HybridHamiltonian, PhasePoint, StateStamp, Weights};

/// Nodes whose kernel sum falls below this fraction of the grid maximum contribute nothing.
pub const DENOMINATOR_FLOOR: f64 = 1e-14;

/// Largest tolerated Hermiticity defect of I_ab before symmetrization.
pub const TABLE_HERMITICITY_TOL: f64 = 1e-9;

/// Gaussian mollifier K_α(z) = exp(−|z|²/(2α²)) / (2πα²); α is the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mollifier {
    alpha: f64,
}

impl Mollifier {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("mollifier width {alpha} must be positive")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    fn peak(&self) -> f64 {
        1.0 / (2.0 * PI * self.alpha * self.alpha)
    }

    #[inline]
    fn axis_factor(&self, d: f64) -> f64 {
        (-0.5 * d * d / (self.alpha * self.alpha)).exp()
    }

    pub fn value(&self, z: PhasePoint) -> f64 {
        self.peak() * self.axis_factor(z.q) * self.axis_factor(z.p)
    }

    pub fn gradient(&self, z: PhasePoint) -> (f64, f64) {
        let k = self.value(z);
        let inv = 1.0 / (self.alpha * self.alpha);
        (-z.q * inv * k, -z.p * inv * k)
    }

    /// Second derivatives (∂qq, ∂qp, ∂pp).
    pub fn hessian(&self, z: PhasePoint) -> (f64, f64, f64) {
        hessian_from(self.value(z), z.q, z.p, 1.0 / (self.alpha * self.alpha))
    }
}

#[inline]
fn hessian_from(k: f64, rq: f64, rp: f64, inv_a2: f64) -> (f64, f64, f64) {
    (
        (rq * rq * inv_a2 - 1.0) * inv_a2 * k,
        rq * rp * inv_a2 * inv_a2 * k,
        (rp * rp * inv_a2 - 1.0) * inv_a2 * k,
    )
}

pub fn kernel_eval(m: &Mollifier, z: PhasePoint) -> f64 {
    m.value(z)
}

pub fn kernel_grad(m: &Mollifier, z: PhasePoint) -> (f64, f64) {
    m.gradient(z)
}

/// Cell-centred tensor grid over a phase-space box (midpoint rule).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureGrid {
    q_range: [f64; 2],
    p_range: [f64; 2],
    q_nodes: Vec<f64>,
    p_nodes: Vec<f64>,
    cell_area: f64,
}

impl QuadratureGrid {
    pub fn new(q_range: [f64; 2], p_range: [f64; 2], nodes: [usize; 2]) -> Result<Self> {
        let finite = q_range.iter().chain(&p_range).all(|x| x.is_finite());
        if !finite || q_range[0] >= q_range[1] || p_range[0] >= p_range[1] {
            return Err(Error::Config(format!(
                "invalid quadrature box {q_range:?} x {p_range:?}"
            )));
        }
        if nodes[0] < 8 || nodes[1] < 8 {
            return Err(Error::Config(format!(
                "quadrature grid {nodes:?} needs >= 8 nodes per axis"
            )));
        }
        let hq = (q_range[1] - q_range[0]) / nodes[0] as f64;
        let hp = (p_range[1] - p_range[0]) / nodes[1] as f64;
        Ok(Self {
            q_range,
            p_range,
            q_nodes: (0..nodes[0]).map(|i| q_range[0] + (i as f64 + 0.5) * hq).collect(),
            p_nodes: (0..nodes[1]).map(|j| p_range[0] + (j as f64 + 0.5) * hp).collect(),
            cell_area: hq * hp,
        })
    }

    pub fn q_nodes(&self) -> &[f64] {
        &self.q_nodes
    }

    pub fn p_nodes(&self) -> &[f64] {
        &self.p_nodes
    }

    pub fn q_range(&self) -> [f64; 2] {
        self.q_range
    }

    pub fn p_range(&self) -> [f64; 2] {
        self.p_range
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.q_nodes.len(), self.p_nodes.len()]
    }

    pub fn len(&self) -> usize {
        self.q_nodes.len() * self.p_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    /// Row-major node index (q index outer).
    pub fn node(&self, index: usize) -> PhasePoint {
        let np = self.p_nodes.len();
        PhasePoint {
            q: self.q_nodes[index / np],
            p: self.p_nodes[index % np],
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.cell_area * self.len() as f64
    }

    pub fn area(&self) -> f64 {
        (self.q_range[1] - self.q_range[0]) * (self.p_range[1] - self.p_range[0])
    }

    /// Distance from z to the nearest box edge (negative outside).
    pub fn edge_distance(&self, z: PhasePoint) -> f64 {
        (z.q - self.q_range[0])
            .min(self.q_range[1] - z.q)
            .min(z.p - self.p_range[0])
            .min(self.p_range[1] - z.p)
    }

    pub fn contains(&self, z: PhasePoint) -> bool {
        self.edge_distance(z) >= 0.0
    }

    /// Same box with `factor` times as many nodes per axis.
    pub fn refined(&self, factor: usize) -> Self {
        let [nq, np] = self.shape();
        Self::new(self.q_range, self.p_range, [nq * factor, np * factor]).expect("refining a valid grid")
    }

    pub fn shifted(&self, shift: PhasePoint) -> Self {
        Self::new(
            [self.q_range[0] + shift.q, self.q_range[1] + shift.q],
            [self.p_range[0] + shift.p, self.p_range[1] + shift.p],
            self.shape(),
        )
        .expect("shifting a valid grid")
    }
}

/// Everything the kernel integrals need besides the state and Ĥ.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSetup {
    pub mollifier: Mollifier,
    pub grid: QuadratureGrid,
    pub options: KernelOptions,
    /// Evaluate grid rows on the rayon pool. Row partial sums are always combined in row order.
    pub parallel: bool,
}

impl KernelSetup {
    pub fn new(mollifier: Mollifier, grid: QuadratureGrid) -> Self {
        Self {
            mollifier,
            grid,
            options: KernelOptions::default(),
            parallel: false,
        }
    }

    /// Disables the distance cutoff so every trajectory is seen at every node.
    pub fn exact(mut self) -> Self {
        self.options.cutoff = false;
        self
    }

    pub fn check_margin(&self, points: &[PhasePoint]) -> Result<()> {
        let need = self.options.min_margin * self.mollifier.alpha();
        for (a, z) in points.iter().enumerate() {
            let d = self.grid.edge_distance(*z);
            if !(d >= need) {
                return Err(Error::Geometry(format!(
                    "trajectory {a} at {z} is {d:.4} from the quadrature box edge (needs {need:.4})"
                )));
            }
        }
        Ok(())
    }
}

/// Non-constant Hamiltonian terms, the only ones with a nonzero bracket {K, f_k}.
#[derive(Debug, Clone)]
struct BracketTerms {
    ids: Vec<usize>,
    coef: Vec<(f64, u32, u32)>,
}

impl BracketTerms {
    fn new(h: &HybridHamiltonian, skip_scalar: bool) -> Self {
        let mut ids = Vec::new();
        let mut coef = Vec::new();
        for (k, t) in h.terms().iter().enumerate() {
            if t.is_constant() || (skip_scalar && t.is_scalar()) || t.coefficient == 0.0 {
                continue;
            }
            ids.push(k);
            coef.push((t.coefficient, t.q_power, t.p_power));
        }
        Self { ids, coef }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    /// (∂_q f_k, ∂_p f_k) at z for every term.
    fn gradients(&self, z: PhasePoint, out: &mut Vec<(f64, f64)>) {
        out.clear();
        out.extend(self.coef.iter().map(|&(cf, m, n)| {
            let (_, gq, gp) = monomial_with_gradient(cf, m, n, z);
            (gq, gp)
        }));
    }
}

/// Kernel data of the active trajectories at one grid node.
struct Node<'a> {
    /// Row-major grid index.
    index: usize,
    z: PhasePoint,
    /// Quadrature weight times 1/S.
    scale: f64,
    s: f64,
    grad_s: (f64, f64),
    active: &'a [usize],
    k: &'a [f64],
    kq: &'a [f64],
    kp: &'a [f64],
    rq: &'a [f64],
    rp: &'a [f64],
}

/// Per-trajectory Gaussian axis factors on the grid, shared by all node sweeps of one state.
struct KernelSweep<'s> {
    setup: &'s KernelSetup,
    weights: &'s [f64],
    /// exp(−(q_i − q_a)²/2α²), index a * nq + i
    gq: Vec<f64>,
    gp: Vec<f64>,
    /// q_i − q_a, index a * nq + i
    dq: Vec<f64>,
    dp: Vec<f64>,
    row_active: Vec<Vec<usize>>,
    floor: f64,
}

impl<'s> KernelSweep<'s> {
    fn new(setup: &'s KernelSetup, points: &[PhasePoint], weights: &'s Weights) -> Self {
        let m = &setup.mollifier;
        let qn = setup.grid.q_nodes();
        let pn = setup.grid.p_nodes();
        let n_traj = points.len();
        let mut gq = Vec::with_capacity(n_traj * qn.len());
        let mut dq = Vec::with_capacity(n_traj * qn.len());
        let mut gp = Vec::with_capacity(n_traj * pn.len());
        let mut dp = Vec::with_capacity(n_traj * pn.len());
        for z in points {
            for &q in qn {
                dq.push(q - z.q);
                gq.push(m.axis_factor(q - z.q));
            }
            for &p in pn {
                dp.push(p - z.p);
                gp.push(m.axis_factor(p - z.p));
            }
        }
        let radius = setup.options.cutoff_radius * m.alpha();
        let row_active = (0..qn.len())
            .map(|i| {
                (0..n_traj)
                    .filter(|&a| !setup.options.cutoff || dq[a * qn.len() + i].abs() <= radius)
                    .collect()
            })
            .collect();
        let mut sweep = Self {
            setup,
            weights: weights.as_slice(),
            gq,
            gp,
            dq,
            dp,
            row_active,
            floor: 0.0,
        };
        let max_s = sweep.max_density();
        sweep.floor = DENOMINATOR_FLOOR * max_s;
        sweep
    }

    fn is_active(&self, a: usize, j: usize) -> bool {
        let radius = self.setup.options.cutoff_radius * self.setup.mollifier.alpha();
        !self.setup.options.cutoff || self.dp[a * self.setup.grid.p_nodes().len() + j].abs() <= radius
    }

    fn max_density(&self) -> f64 {
        let [nq, np] = self.setup.grid.shape();
        let peak = self.setup.mollifier.peak();
        let mut best = 0.0_f64;
        for i in 0..nq {
            for j in 0..np {
                let s: f64 = self.row_active[i]
                    .iter()
                    .filter(|&&a| self.is_active(a, j))
                    .map(|&a| self.weights[a] * peak * self.gq[a * nq + i] * self.gp[a * np + j])
                    .sum();
                best = best.max(s);
            }
        }
        best
    }

    /// Runs `visit` on every node above the density floor, one accumulator per grid row.
    /// Rows come back in order so the caller's reduction is deterministic.
    fn sweep_rows<A, I, F>(&self, init: I, visit: F) -> Vec<A>
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, &Node) + Sync,
    {
        let [nq, np] = self.setup.grid.shape();
        let row = |i: usize| {
            let mut acc = init();
            let peak = self.setup.mollifier.peak();
            let inv_a2 = 1.0 / (self.setup.mollifier.alpha() * self.setup.mollifier.alpha());
            let area = self.setup.grid.cell_area();
            let q = self.setup.grid.q_nodes()[i];
            let cap = self.row_active[i].len();
            let (mut active, mut k, mut kq, mut kp, mut rq, mut rp) = (
                Vec::with_capacity(cap),
                Vec::with_capacity(cap),
                Vec::with_capacity(cap),
                Vec::with_capacity(cap),
                Vec::with_capacity(cap),
                Vec::with_capacity(cap),
            );
            for j in 0..np {
                active.clear();
                k.clear();
                kq.clear();
                kp.clear();
                rq.clear();
                rp.clear();
                let (mut s, mut sq, mut sp) = (0.0, 0.0, 0.0);
                for &a in &self.row_active[i] {
                    if !self.is_active(a, j) {
                        continue;
                    }
                    let x = self.dq[a * nq + i];
                    let y = self.dp[a * np + j];
                    let ka = peak * self.gq[a * nq + i] * self.gp[a * np + j];
                    let (ga, gb) = (-x * inv_a2 * ka, -y * inv_a2 * ka);
                    let w = self.weights[a];
                    s += w * ka;
                    sq += w * ga;
                    sp += w * gb;
                    active.push(a);
                    k.push(ka);
                    kq.push(ga);
                    kp.push(gb);
                    rq.push(x);
                    rp.push(y);
                }
                if !(s > self.floor) || s == 0.0 {
                    continue;
                }
                let node = Node {
                    index: i * np + j,
                    z: PhasePoint {
                        q,
                        p: self.setup.grid.p_nodes()[j],
                    },
                    scale: area / s,
                    s,
                    grad_s: (sq, sp),
                    active: &active,
                    k: &k,
                    kq: &kq,
                    kp: &kp,
                    rq: &rq,
                    rp: &rp,
                };
                visit(&mut acc, &node);
            }
            acc
        };
        if self.setup.parallel {
            (0..nq).into_par_iter().map(row).collect()
        } else {
            (0..nq).map(row).collect()
        }
    }
}

fn sum_rows(rows: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for r in rows {
        for (t, x) in total.iter_mut().zip(r) {
            *t += x;
        }
    }
    total
}

/// I_ab for all trajectory pairs, tied to the state it was computed from.
#[derive(Debug, Clone)]
pub struct KernelIntegralTable {
    n_traj: usize,
    stamp: StateStamp,
    term_ids: Vec<usize>,
    /// s_abk at index (a * N + b) * K + k
    coeffs: Vec<f64>,
    integrals: Vec<CMatrix>,
    hermiticity_defect: f64,
}

impl KernelIntegralTable {
    pub fn n_trajectories(&self) -> usize {
        self.n_traj
    }

    pub fn stamp(&self) -> StateStamp {
        self.stamp
    }

    /// I_ab (Hermitian).
    pub fn get(&self, a: usize, b: usize) -> &CMatrix {
        &self.integrals[a * self.n_traj + b]
    }

    /// Scalar coefficient multiplying Hamiltonian term `term` in I_ab.
    pub fn coefficient(&self, a: usize, b: usize, term: usize) -> Option<f64> {
        let k = self.term_ids.iter().position(|&t| t == term)?;
        Some(self.coeffs[(a * self.n_traj + b) * self.term_ids.len() + k])
    }

    /// Largest Hermiticity defect seen before symmetrization.
    pub fn hermiticity_defect(&self) -> f64 {
        self.hermiticity_defect
    }

    pub fn max_norm(&self) -> f64 {
        self.integrals.iter().map(linalg::frobenius).fold(0.0, f64::max)
    }

    pub fn check_fresh(&self, state: &ClosureState) -> Result<()> {
        let s = state.stamp();
        if s != self.stamp || state.n_trajectories() != self.n_traj {
            return Err(Error::Stale {
                table: self.stamp.0,
                state: s.0,
            });
        }
        Ok(())
    }
}

fn assemble_integrals(
    h: &HybridHamiltonian,
    terms: &BracketTerms,
    coeffs: &[f64],
    n_traj: usize,
) -> Result<(Vec<CMatrix>, f64)> {
    let dim = h.dim();
    let nk = terms.len();
    let mut out = Vec::with_capacity(n_traj * n_traj);
    let mut worst = 0.0_f64;
    for ab in 0..n_traj * n_traj {
        let mut m = CMatrix::zeros(dim, dim);
        for (k, &t) in terms.ids.iter().enumerate() {
            let s = coeffs[ab * nk + k];
            if s != 0.0 {
                m += &h.terms()[t].matrix * c(s);
            }
        }
        let defect = linalg::hermiticity_defect(&m);
        worst = worst.max(defect);
        out.push(if defect == 0.0 { m } else { linalg::hermitian_part(&m) });
    }
    if worst > TABLE_HERMITICITY_TOL {
        return Err(Error::Invariant(format!(
            "kernel integral Hermiticity defect {worst:e}"
        )));
    }
    Ok((out, worst))
}

/// I_ab = ½ Σ_nodes wt · K_a {K_b, Ĥ} / S for every pair.
pub fn compute_i(
    h: &HybridHamiltonian,
    points: &[PhasePoint],
    weights: &Weights,
    setup: &KernelSetup,
) -> Result<KernelIntegralTable> {
    setup.check_margin(points)?;
    let terms = BracketTerms::new(h, false);
    let coeffs = integral_coefficients(&terms, points, weights, setup);
    let n = points.len();
    let (integrals, hermiticity_defect) = assemble_integrals(h, &terms, &coeffs, n)?;
    Ok(KernelIntegralTable {
        n_traj: n,
        stamp: stamp_of(points, weights),
        term_ids: terms.ids,
        coeffs,
        integrals,
        hermiticity_defect,
    })
}

/// Convenience wrapper taking the whole state.
pub fn compute_i_for(state: &ClosureState, h: &HybridHamiltonian, setup: &KernelSetup) -> Result<KernelIntegralTable> {
    compute_i(h, &state.points, &state.weights, setup)
}

fn integral_coefficients(
    terms: &BracketTerms,
    points: &[PhasePoint],
    weights: &Weights,
    setup: &KernelSetup,
) -> Vec<f64> {
    let n = points.len();
    let nk = terms.len();
    let len = n * n * nk;
    if nk == 0 {
        return vec![0.0; len];
    }
    let sweep = KernelSweep::new(setup, points, weights);
    let rows = sweep.sweep_rows(
        || (vec![0.0; len], Vec::new(), Vec::new()),
        |(acc, grads, brackets): &mut (Vec<f64>, Vec<(f64, f64)>, Vec<f64>), node| {
            terms.gradients(node.z, grads);
            let na = node.active.len();
            // {K_b, f_k} for every active b
            brackets.clear();
            for ib in 0..na {
                for &(fq, fp) in grads.iter() {
                    brackets.push(node.kq[ib] * fp - node.kp[ib] * fq);
                }
            }
            for (ia, &a) in node.active.iter().enumerate() {
                let ka = 0.5 * node.scale * node.k[ia];
                for (ib, &b) in node.active.iter().enumerate() {
                    let base = (a * n + b) * nk;
                    let br = &brackets[ib * nk..(ib + 1) * nk];
                    for k in 0..nk {
                        acc[base + k] += ka * br[k];
                    }
                }
            }
        },
    );
    sum_rows(rows.into_iter().map(|r| r.0).collect(), len)
}

/// Exact center-derivatives ∂I_ab/∂ζ_s of the discretized integrals.
#[derive(Debug, Clone)]
pub struct KernelDerivativeTable {
    n_traj: usize,
    term_ids: Vec<usize>,
    /// (∂/∂q_s, ∂/∂p_s) of s_abk at ((a * N + b) * N + s) * K + k
    coeffs: Vec<(f64, f64)>,
    matrices: Vec<CMatrix>,
}

impl KernelDerivativeTable {
    fn index(&self, a: usize, b: usize, s: usize) -> usize {
        (a * self.n_traj + b) * self.n_traj + s
    }

    fn assemble(&self, a: usize, b: usize, s: usize, pick: impl Fn((f64, f64)) -> f64) -> CMatrix {
        let nk = self.term_ids.len();
        let base = self.index(a, b, s) * nk;
        let mut m = CMatrix::zeros(self.matrices[0].nrows(), self.matrices[0].ncols());
        for (k, &t) in self.term_ids.iter().enumerate() {
            let x = pick(self.coeffs[base + k]);
            if x != 0.0 {
                m += &self.matrices[t] * c(x);
            }
        }
        m
    }

    /// ∂I_ab/∂q_s
    pub fn dq(&self, a: usize, b: usize, s: usize) -> CMatrix {
        self.assemble(a, b, s, |d| d.0)
    }

    /// ∂I_ab/∂p_s
    pub fn dp(&self, a: usize, b: usize, s: usize) -> CMatrix {
        self.assemble(a, b, s, |d| d.1)
    }

    /// Largest entry of ∂I_ab/∂ζ_s over both components.
    pub fn max_abs(&self, a: usize, b: usize, s: usize) -> f64 {
        linalg::max_abs_entry(&self.dq(a, b, s)).max(linalg::max_abs_entry(&self.dp(a, b, s)))
    }
}

pub fn compute_di(
    h: &HybridHamiltonian,
    points: &[PhasePoint],
    weights: &Weights,
    setup: &KernelSetup,
) -> Result<KernelDerivativeTable> {
    setup.check_margin(points)?;
    let terms = BracketTerms::new(h, false);
    let n = points.len();
    let nk = terms.len();
    let len = n * n * n * nk;
    let matrices = h.terms().iter().map(|t| t.matrix.clone()).collect();
    if nk == 0 {
        return Ok(KernelDerivativeTable {
            n_traj: n,
            term_ids: terms.ids,
            coeffs: vec![(0.0, 0.0); len],
            matrices,
        });
    }
    let w = weights.as_slice();
    let inv_a2 = 1.0 / (setup.mollifier.alpha() * setup.mollifier.alpha());
    let sweep = KernelSweep::new(setup, points, weights);
    let rows = sweep.sweep_rows(
        || (vec![0.0; 2 * len], Vec::new()),
        |(acc, grads): &mut (Vec<f64>, Vec<(f64, f64)>), node| {
            terms.gradients(node.z, grads);
            let half = 0.5 * node.scale;
            for (ia, &a) in node.active.iter().enumerate() {
                for (ib, &b) in node.active.iter().enumerate() {
                    let (hqq, hqp, hpp) = hessian_from(node.k[ib], node.rq[ib], node.rp[ib], inv_a2);
                    for (k, &(fq, fp)) in grads.iter().enumerate() {
                        let bracket = node.kq[ib] * fp - node.kp[ib] * fq;
                        // through K_a: ∂K_a/∂ζ_a = −∇K_a
                        let ia_idx = (((a * n + b) * n + a) * nk + k) * 2;
                        acc[ia_idx] -= half * node.kq[ia] * bracket;
                        acc[ia_idx + 1] -= half * node.kp[ia] * bracket;
                        // through ∇K_b: ∂(∇K_b)/∂ζ_b = −Hess K_b
                        let ib_idx = (((a * n + b) * n + b) * nk + k) * 2;
                        acc[ib_idx] -= half * node.k[ia] * (hqq * fp - hqp * fq);
                        acc[ib_idx + 1] -= half * node.k[ia] * (hqp * fp - hpp * fq);
                        // through the denominator, every active s
                        let g = half * node.k[ia] * bracket / node.s;
                        for (is, &s) in node.active.iter().enumerate() {
                            let idx = (((a * n + b) * n + s) * nk + k) * 2;
                            acc[idx] += g * w[s] * node.kq[is];
                            acc[idx + 1] += g * w[s] * node.kp[is];
                        }
                    }
                }
            }
        },
    );
    let flat = sum_rows(rows.into_iter().map(|r| r.0).collect(), 2 * len);
    Ok(KernelDerivativeTable {
        n_traj: n,
        term_ids: terms.ids,
        coeffs: flat.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
        matrices,
    })
}

/// I_ab restricted to non-scalar terms plus ∇_ζ of h_ħ = Σ_abk W_abk s_abk,
/// computed in a single node sweep without materializing ∂I_ab/∂ζ_s.
pub(crate) struct CouplingSweep {
    pub integrals: Vec<CMatrix>,
    pub gradient: Vec<(f64, f64)>,
}

/// `contract(a, b, term)` must return W_abk = ħ w_a w_b Tr(i[ρ_a, ρ_b] B_k).
pub(crate) fn coupling_sweep(
    h: &HybridHamiltonian,
    points: &[PhasePoint],
    weights: &Weights,
    setup: &KernelSetup,
    contract: impl Fn(usize, usize, usize) -> f64,
) -> Result<CouplingSweep> {
    setup.check_margin(points)?;
    let terms = BracketTerms::new(h, true);
    let n = points.len();
    let nk = terms.len();
    let dim = h.dim();
    if nk == 0 {
        return Ok(CouplingSweep {
            integrals: vec![CMatrix::zeros(dim, dim); n * n],
            gradient: vec![(0.0, 0.0); n],
        });
    }
    let mut wt = vec![0.0; n * n * nk];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            for (k, &t) in terms.ids.iter().enumerate() {
                wt[(a * n + b) * nk + k] = contract(a, b, t);
            }
        }
    }
    let w = weights.as_slice();
    let inv_a2 = 1.0 / (setup.mollifier.alpha() * setup.mollifier.alpha());
    let len_s = n * n * nk;
    let sweep = KernelSweep::new(setup, points, weights);

    struct Acc {
        s: Vec<f64>,
        grad: Vec<f64>,
        grads: Vec<(f64, f64)>,
        brackets: Vec<f64>,
        y: Vec<f64>,
        v: Vec<f64>,
    }
    let rows = sweep.sweep_rows(
        || Acc {
            s: vec![0.0; len_s],
            grad: vec![0.0; 2 * n],
            grads: Vec::new(),
            brackets: Vec::new(),
            y: Vec::new(),
            v: Vec::new(),
        },
        |acc, node| {
            terms.gradients(node.z, &mut acc.grads);
            let na = node.active.len();
            acc.brackets.clear();
            for ib in 0..na {
                for &(fq, fp) in acc.grads.iter() {
                    acc.brackets.push(node.kq[ib] * fp - node.kp[ib] * fq);
                }
            }
            // Y_bk = Σ_a W_abk K_a,  V_a = Σ_bk W_abk {K_b, f_k}
            acc.y.clear();
            acc.y.resize(na * nk, 0.0);
            acc.v.clear();
            acc.v.resize(na, 0.0);
            let half = 0.5 * node.scale;
            let mut numerator = 0.0;
            for (ia, &a) in node.active.iter().enumerate() {
                let ka = node.k[ia];
                let mut va = 0.0;
                for (ib, &b) in node.active.iter().enumerate() {
                    let base = (a * n + b) * nk;
                    let br = &acc.brackets[ib * nk..(ib + 1) * nk];
                    for k in 0..nk {
                        acc.s[base + k] += half * ka * br[k];
                        let wabk = wt[base + k];
                        va += wabk * br[k];
                        acc.y[ib * nk + k] += wabk * ka;
                    }
                }
                acc.v[ia] = va;
                numerator += ka * va;
            }
            for (is, &s) in node.active.iter().enumerate() {
                let (hqq, hqp, hpp) = hessian_from(node.k[is], node.rq[is], node.rp[is], inv_a2);
                let mut through_grad = (0.0, 0.0);
                for (k, &(fq, fp)) in acc.grads.iter().enumerate() {
                    let y = acc.y[is * nk + k];
                    through_grad.0 -= y * (hqq * fp - hqp * fq);
                    through_grad.1 -= y * (hqp * fp - hpp * fq);
                }
                // ∂K_s/∂ζ_s = −∇K_s
                let denom = numerator * w[s] / node.s;
                acc.grad[2 * s] += half * (-node.kq[is] * acc.v[is] + through_grad.0 + denom * node.kq[is]);
                acc.grad[2 * s + 1] += half * (-node.kp[is] * acc.v[is] + through_grad.1 + denom * node.kp[is]);
            }
        },
    );
    let mut s_total = vec![0.0; len_s];
    let mut g_total = vec![0.0; 2 * n];
    for r in rows {
        for (t, x) in s_total.iter_mut().zip(&r.s) {
            *t += x;
        }
        for (t, x) in g_total.iter_mut().zip(&r.grad) {
            *t += x;
        }
    }
    let (integrals, _) = assemble_integrals(h, &terms, &s_total, n)?;
    Ok(CouplingSweep {
        integrals,
        gradient: g_total.chunks_exact(2).map(|g| (g[0], g[1])).collect(),
    })
}

/// J_ab sampled on the grid nodes, stored for a < b only.
#[derive(Debug, Clone)]
pub struct KernelJTable {
    n_traj: usize,
    n_nodes: usize,
    stamp: StateStamp,
    /// pair-major: pair_index(a, b) * n_nodes + node
    values: Vec<f64>,
    cell_area: f64,
    points: Vec<PhasePoint>,
    weights: Weights,
    mollifier: Mollifier,
    q_range: [f64; 2],
    p_range: [f64; 2],
    floor: f64,
}

impl KernelJTable {
    fn pair_index(&self, a: usize, b: usize) -> usize {
        debug_assert!(a < b);
        a * self.n_traj - a * (a + 1) / 2 + (b - a - 1)
    }

    pub fn n_trajectories(&self) -> usize {
        self.n_traj
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn stamp(&self) -> StateStamp {
        self.stamp
    }

    /// J_ab at grid node `node`; J_ba is the exact negation and J_aa = 0.
    pub fn value(&self, a: usize, b: usize, node: usize) -> f64 {
        use std::cmp::Ordering;
        match a.cmp(&b) {
            Ordering::Equal => 0.0,
            Ordering::Less => self.values[self.pair_index(a, b) * self.n_nodes + node],
            Ordering::Greater => -self.values[self.pair_index(b, a) * self.n_nodes + node],
        }
    }

    /// Σ_nodes wt · J_ab.
    pub fn integral(&self, a: usize, b: usize) -> f64 {
        (0..self.n_nodes).map(|i| self.value(a, b, i)).sum::<f64>() * self.cell_area
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Closed-form J_ab at an arbitrary point inside the box, all pairs at once (row-major N×N).
    pub fn evaluate_at(&self, z: PhasePoint) -> Result<Vec<f64>> {
        let inside =
            z.q >= self.q_range[0] && z.q <= self.q_range[1] && z.p >= self.p_range[0] && z.p <= self.p_range[1];
        if !inside {
            return Err(Error::Geometry(format!(
                "sample point {z} lies outside the quadrature box"
            )));
        }
        let n = self.n_traj;
        let w = self.weights.as_slice();
        let mut k = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let (mut s, mut sq, mut sp) = (0.0, 0.0, 0.0);
        for (a, za) in self.points.iter().enumerate() {
            let r = PhasePoint {
                q: z.q - za.q,
                p: z.p - za.p,
            };
            let ka = self.mollifier.value(r);
            let ga = self.mollifier.gradient(r);
            s += w[a] * ka;
            sq += w[a] * ga.0;
            sp += w[a] * ga.1;
            k.push(ka);
            g.push(ga);
        }
        let mut out = vec![0.0; n * n];
        if !(s > self.floor) || s == 0.0 {
            return Ok(out);
        }
        for a in 0..n {
            for b in a + 1..n {
                let j = j_pair(k[a], g[a], k[b], g[b], s, (sq, sp));
                out[a * n + b] = j;
                out[b * n + a] = -j;
            }
        }
        Ok(out)
    }
}

/// ¼(2{K_a,K_b}/S − K_b{K_a,S}/S² + K_a{K_b,S}/S²)
#[inline]
fn j_pair(ka: f64, ga: (f64, f64), kb: f64, gb: (f64, f64), s: f64, gs: (f64, f64)) -> f64 {
    let bracket = |x: (f64, f64), y: (f64, f64)| x.0 * y.1 - x.1 * y.0;
    0.25 * (2.0 * bracket(ga, gb) / s + (ka * bracket(gb, gs) - kb * bracket(ga, gs)) / (s * s))
}

pub fn compute_j(points: &[PhasePoint], weights: &Weights, setup: &KernelSetup) -> Result<KernelJTable> {
    setup.check_margin(points)?;
    let n = points.len();
    let n_nodes = setup.grid.len();
    let pairs = n * n.saturating_sub(1) / 2;
    let sweep = KernelSweep::new(setup, points, weights);
    let pair_index = |a: usize, b: usize| a * n - a * (a + 1) / 2 + (b - a - 1);
    let rows = sweep.sweep_rows(Vec::<(usize, usize, f64)>::new, |acc, node| {
        for (ia, &a) in node.active.iter().enumerate() {
            for (ib, &b) in node.active.iter().enumerate() {
                if a >= b {
                    continue;
                }
                let j = j_pair(
                    node.k[ia],
                    (node.kq[ia], node.kp[ia]),
                    node.k[ib],
                    (node.kq[ib], node.kp[ib]),
                    node.s,
                    node.grad_s,
                );
                acc.push((pair_index(a, b), node.index, j));
            }
        }
    });
    let mut values = vec![0.0; pairs * n_nodes];
    for entries in rows {
        for (pair, node, j) in entries {
            values[pair * n_nodes + node] = j;
        }
    }
    Ok(KernelJTable {
        n_traj: n,
        n_nodes,
        stamp: stamp_of(points, weights),
        values,
        cell_area: setup.grid.cell_area(),
        points: points.to_vec(),
        weights: weights.clone(),
        mollifier: setup.mollifier,
        q_range: setup.grid.q_range(),
        p_range: setup.grid.p_range(),
        floor: sweep.floor,
    })
}

/// Plain-data view of the kernel tables for the JSON debug dump.
#[derive(Debug, Serialize)]
pub struct KernelTableDump {
    pub alpha: f64,
    pub grid_shape: [usize; 2],
    pub q_range: [f64; 2],
    pub p_range: [f64; 2],
    /// I_ab as row-major [re, im] entries, indexed [a][b].
    pub i_ab: Vec<Vec<Vec<[f64; 2]>>>,
    pub i_hermiticity_defect: f64,
    /// Σ_nodes wt J_ab, indexed [a][b].
    pub j_integrals: Vec<Vec<f64>>,
    pub j_max_abs: f64,
}

impl KernelTableDump {
    pub fn new(setup: &KernelSetup, i: &KernelIntegralTable, j: &KernelJTable) -> Self {
        let n = i.n_trajectories();
        let flat = |m: &CMatrix| {
            let mut v = Vec::new();
            for r in 0..m.nrows() {
                for col in 0..m.ncols() {
                    v.push([m[(r, col)].re, m[(r, col)].im]);
                }
            }
            v
        };
        Self {
            alpha: setup.mollifier.alpha(),
            grid_shape: setup.grid.shape(),
            q_range: setup.grid.q_range(),
            p_range: setup.grid.p_range(),
            i_ab: (0..n).map(|a| (0..n).map(|b| flat(i.get(a, b))).collect()).collect(),
            i_hermiticity_defect: i.hermiticity_defect(),
            j_integrals: (0..n).map(|a| (0..n).map(|b| j.integral(a, b)).collect()).collect(),
            j_max_abs: j.max_abs(),
        }
    }
}
