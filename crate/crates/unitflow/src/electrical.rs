//! Quadratic minimization over circulations via vertex potentials.
//!
//! The cycle basis is never built. A circulation that minimizes
//! 1/2 sum r x^2 - <h, x> has the form x = R^-1 (h + B phi), so everything
//! reduces to weighted Laplacian systems in phi.

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};

use crate::graph::{Problem, UnionFind};
use crate::state::FlowState;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ElectricalError {
    #[error("injection does not sum to zero on a component (imbalance {0:e})")]
    Unbalanced(f64),
    #[error("conjugate gradient did not converge (relative residual {0:e})")]
    NoConvergence(f64),
    #[error("non-finite or non-positive conductance on edge {0}")]
    BadConductance(usize),
    #[error("dense factorization failed")]
    Factorization,
}

/// Above this vertex count the potential solves switch from dense
/// factorizations to Jacobi-preconditioned conjugate gradient.
pub const DENSE_LIMIT: usize = 200;
pub const CG_TOL: f64 = 1e-10;

/// Directed multigraph. Orientation only fixes the sign of edge flows.
#[derive(Debug, Clone)]
pub struct Network {
    pub n: usize,
    pub tail: Vec<usize>,
    pub head: Vec<usize>,
    comp: Vec<usize>,
    pins: Vec<usize>,
    /// Column of each vertex in the reduced system, None for pinned vertices.
    col: Vec<Option<usize>>,
    cols: usize,
    /// Triangular factor of the unit-weight incidence matrix, built on first use.
    unit_qr: OnceCell<Givens>,
}

impl Network {
    pub fn new(n: usize, tail: Vec<usize>, head: Vec<usize>) -> Self {
        let mut uf = UnionFind::new(n);
        for (&t, &h) in tail.iter().zip(&head) {
            uf.union(t, h);
        }
        let mut comp = vec![usize::MAX; n];
        let mut pins = Vec::new();
        let mut col = vec![None; n];
        let mut cols = 0;
        for v in 0..n {
            let r = uf.find(v);
            if comp[r] == usize::MAX {
                // Lowest-index vertex of each component is pinned to zero.
                comp[r] = pins.len();
                pins.push(v);
            } else {
                col[v] = Some(cols);
                cols += 1;
            }
            comp[v] = comp[r];
        }
        Network { n, tail, head, comp, pins, col, cols, unit_qr: OnceCell::new() }
    }

    pub fn from_problem(p: &Problem) -> Self {
        Network::new(p.n, p.tails(), p.heads())
    }

    pub fn m(&self) -> usize {
        self.tail.len()
    }

    pub fn components(&self) -> usize {
        self.pins.len()
    }

    /// B^T x: inflow minus outflow.
    pub fn divergence(&self, x: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in 0..self.m() {
            d[self.head[e]] += x[e];
            d[self.tail[e]] -= x[e];
        }
        d
    }

    /// (B phi)_e = phi_head - phi_tail.
    pub fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.m()).map(|e| phi[self.head[e]] - phi[self.tail[e]]).collect()
    }

    fn check_conductances(&self, cond: &[f64]) -> Result<(), ElectricalError> {
        for (e, &g) in cond.iter().enumerate() {
            if !(g.is_finite() && g > 0.0) {
                return Err(ElectricalError::BadConductance(e));
            }
        }
        Ok(())
    }

    fn centered_injection(&self, inj: &[f64]) -> Result<Vec<f64>, ElectricalError> {
        let k = self.components();
        let mut sum = vec![0.0; k];
        let mut mass = vec![0.0; k];
        for v in 0..self.n {
            sum[self.comp[v]] += inj[v];
            mass[self.comp[v]] += inj[v].abs();
        }
        for c in 0..k {
            if sum[c].abs() > 1e-9 * (1.0 + mass[c]) {
                return Err(ElectricalError::Unbalanced(sum[c]));
            }
        }
        let mut out = inj.to_vec();
        // Push the rounding-level imbalance onto the pinned vertex.
        for c in 0..k {
            out[self.pins[c]] -= sum[c];
        }
        Ok(out)
    }

    /// Solves L phi = inj for the Laplacian with the given conductances,
    /// pinning the lowest vertex of every component to zero.
    pub fn solve_potentials(
        &self,
        cond: &[f64],
        inj: &[f64],
        tol: f64,
    ) -> Result<Vec<f64>, ElectricalError> {
        self.check_conductances(cond)?;
        let b = self.centered_injection(inj)?;
        if self.cols == 0 {
            return Ok(vec![0.0; self.n]);
        }
        if self.n <= DENSE_LIMIT {
            self.solve_dense(cond, &b)
        } else {
            self.solve_cg(cond, &b, tol)
        }
    }

    fn solve_dense(&self, cond: &[f64], b: &[f64]) -> Result<Vec<f64>, ElectricalError> {
        let k = self.cols;
        let mut lap = DMatrix::<f64>::zeros(k, k);
        for e in 0..self.m() {
            let (ct, ch) = (self.col[self.tail[e]], self.col[self.head[e]]);
            let g = cond[e];
            if let Some(i) = ct {
                lap[(i, i)] += g;
            }
            if let Some(j) = ch {
                lap[(j, j)] += g;
            }
            if let (Some(i), Some(j)) = (ct, ch) {
                lap[(i, j)] -= g;
                lap[(j, i)] -= g;
            }
        }
        let mut rhs = DVector::<f64>::zeros(k);
        for v in 0..self.n {
            if let Some(i) = self.col[v] {
                rhs[i] = b[v];
            }
        }
        let chol = lap.cholesky().ok_or(ElectricalError::Factorization)?;
        let x = chol.solve(&rhs);
        Ok(self.expand(x.as_slice()))
    }

    fn expand(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|v| self.col[v].map_or(0.0, |i| x[i])).collect()
    }

    fn apply_laplacian(&self, cond: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for e in 0..self.m() {
            let (t, h) = (self.tail[e], self.head[e]);
            let flow = cond[e] * (x[h] - x[t]);
            out[h] += flow;
            out[t] -= flow;
        }
        for &p in &self.pins {
            out[p] = 0.0;
        }
    }

    fn solve_cg(&self, cond: &[f64], b: &[f64], tol: f64) -> Result<Vec<f64>, ElectricalError> {
        let n = self.n;
        let mut diag = vec![0.0; n];
        for e in 0..self.m() {
            diag[self.tail[e]] += cond[e];
            diag[self.head[e]] += cond[e];
        }
        let mut rhs = b.to_vec();
        for &p in &self.pins {
            rhs[p] = 0.0;
        }
        let bnorm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let precond = |r: &[f64], z: &mut [f64]| {
            for v in 0..n {
                z[v] = if diag[v] > 0.0 { r[v] / diag[v] } else { 0.0 };
            }
            for &p in &self.pins {
                z[p] = 0.0;
            }
        };
        let mut r = rhs.clone();
        let mut z = vec![0.0; n];
        precond(&r, &mut z);
        let mut d = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ad = vec![0.0; n];
        let cap = 50 * n;
        let mut rel = 1.0;
        for _ in 0..cap {
            self.apply_laplacian(cond, &d, &mut ad);
            let dad: f64 = d.iter().zip(&ad).map(|(a, b)| a * b).sum();
            if dad <= 0.0 {
                break;
            }
            let alpha = rz / dad;
            for v in 0..n {
                x[v] += alpha * d[v];
                r[v] -= alpha * ad[v];
            }
            rel = r.iter().map(|x| x * x).sum::<f64>().sqrt() / bnorm;
            if rel <= tol {
                return Ok(x);
            }
            precond(&r, &mut z);
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for v in 0..n {
                d[v] = z[v] + beta * d[v];
            }
        }
        Err(ElectricalError::NoConvergence(rel))
    }

    /// Minimizes sum_e g_e (h_e + (B phi)_e)^2 over phi and returns
    /// (x, phi) with x = G (h + B phi).
    ///
    /// Equivalently x maximizes <h, x> - 1/2 sum x^2 / g_e over circulations.
    /// The returned x is cleaned to an exact circulation by routing the
    /// rounding-level imbalance along a maximum-conductance spanning forest.
    pub fn weighted_projection(
        &self,
        cond: &[f64],
        h: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ElectricalError> {
        self.check_conductances(cond)?;
        let mut order: Vec<usize> = (0..self.m()).collect();
        order.sort_by(|&a, &b| cond[b].partial_cmp(&cond[a]).unwrap());
        let phi = if self.cols == 0 {
            vec![0.0; self.n]
        } else if self.n <= DENSE_LIMIT {
            let mut qr = Givens::new(self.cols);
            for &e in &order {
                let s = cond[e].sqrt();
                qr.add_row(&self.row(e, s), -s * h[e]);
            }
            self.expand(&qr.solve()?)
        } else {
            let mut inj = vec![0.0; self.n];
            for e in 0..self.m() {
                // L phi = -B^T G h
                let gh = cond[e] * h[e];
                inj[self.head[e]] -= gh;
                inj[self.tail[e]] += gh;
            }
            self.solve_potentials(cond, &inj, CG_TOL)?
        };
        let mut x: Vec<f64> = (0..self.m())
            .map(|e| cond[e] * (h[e] + phi[self.head[e]] - phi[self.tail[e]]))
            .collect();
        self.route_imbalance(&order, &mut x);
        Ok((x, phi))
    }

    /// Nonzeros of the reduced incidence row of edge e, scaled by s.
    fn row(&self, e: usize, s: f64) -> [(usize, f64); 2] {
        let h = self.col[self.head[e]].map_or((usize::MAX, 0.0), |j| (j, s));
        let t = self.col[self.tail[e]].map_or((usize::MAX, 0.0), |j| (j, -s));
        [h, t]
    }

    /// Routes -B^T x along a maximum-conductance spanning forest so that x
    /// becomes a circulation up to rounding.
    pub fn clean_circulation(&self, cond: &[f64], x: &mut [f64]) {
        let mut order: Vec<usize> = (0..self.m()).collect();
        order.sort_by(|&a, &b| cond[b].partial_cmp(&cond[a]).unwrap());
        self.route_imbalance(&order, x);
    }

    /// Routes -B^T x along the spanning forest built greedily from `order`.
    fn route_imbalance(&self, order: &[usize], x: &mut [f64]) {
        let mut imbalance = self.divergence(x);
        let mut uf = UnionFind::new(self.n);
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.n];
        for &e in order {
            if uf.union(self.tail[e], self.head[e]) {
                adj[self.tail[e]].push(e);
                adj[self.head[e]].push(e);
            }
        }
        let mut parent_edge = vec![usize::MAX; self.n];
        let mut seen = vec![false; self.n];
        let mut bfs = Vec::with_capacity(self.n);
        for &root in &self.pins {
            seen[root] = true;
            bfs.push(root);
            let mut i = bfs.len() - 1;
            while i < bfs.len() {
                let v = bfs[i];
                i += 1;
                for &e in &adj[v] {
                    let u = if self.tail[e] == v { self.head[e] } else { self.tail[e] };
                    if !seen[u] {
                        seen[u] = true;
                        parent_edge[u] = e;
                        bfs.push(u);
                    }
                }
            }
        }
        for &v in bfs.iter().rev() {
            let e = parent_edge[v];
            if e == usize::MAX {
                continue;
            }
            let need = imbalance[v];
            if need == 0.0 {
                continue;
            }
            let t = if self.tail[e] == v { need } else { -need };
            x[e] += t;
            imbalance[self.tail[e]] -= t;
            imbalance[self.head[e]] += t;
        }
    }

    /// Unweighted least-squares fit g ~ B phi; returns (phi, g - B phi).
    pub fn least_squares(&self, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ElectricalError> {
        let m = self.m();
        let ones = vec![1.0; m];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        // x = -g + B phi with phi minimizing ||B phi - g||.
        if self.cols == 0 || self.n > DENSE_LIMIT {
            let (x, phi) = self.weighted_projection(&ones, &neg)?;
            return Ok((phi, x.iter().map(|v| -v).collect()));
        }
        let qr = self.unit_qr.get_or_init(|| {
            let mut qr = Givens::new(self.cols);
            for e in 0..m {
                qr.add_row(&self.row(e, 1.0), 0.0);
            }
            qr
        });
        // Semi-normal equations R^T R x = A^T g plus one refinement step.
        let mut x = vec![0.0; self.cols];
        let mut res = g.to_vec();
        for _ in 0..2 {
            let mut atr = vec![0.0; self.cols];
            for e in 0..m {
                for (j, a) in self.row(e, 1.0) {
                    if j != usize::MAX {
                        atr[j] += a * res[e];
                    }
                }
            }
            let dx = qr.solve_normal(&atr)?;
            for (a, b) in x.iter_mut().zip(&dx) {
                *a += b;
            }
            let phi = self.expand(&x);
            res = (0..m).map(|e| g[e] - (phi[self.head[e]] - phi[self.tail[e]])).collect();
        }
        let phi = self.expand(&x);
        Ok((phi, res))
    }
}

/// Least-squares factorization built one row at a time with Givens
/// rotations. Rows are added heaviest first; each rotation is orthogonal, so
/// graded row weights do not hurt accuracy the way normal equations would.
#[derive(Debug, Clone)]
struct Givens {
    k: usize,
    /// Upper triangle, row-major k x k.
    r: Vec<f64>,
    /// Q^T b restricted to the first k rows.
    z: Vec<f64>,
    filled: Vec<bool>,
    work: Vec<f64>,
}

impl Givens {
    fn new(k: usize) -> Self {
        Givens { k, r: vec![0.0; k * k], z: vec![0.0; k], filled: vec![false; k], work: vec![0.0; k] }
    }

    fn add_row(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let k = self.k;
        let mut start = k;
        for &(j, a) in entries {
            if j < k && a != 0.0 {
                self.work[j] += a;
                start = start.min(j);
            }
        }
        let mut beta = rhs;
        for j in start..k {
            let b = self.work[j];
            if b == 0.0 {
                continue;
            }
            let row = &mut self.r[j * k..(j + 1) * k];
            if !self.filled[j] {
                row[j..].copy_from_slice(&self.work[j..]);
                self.z[j] = beta;
                self.filled[j] = true;
                self.work[j..].iter_mut().for_each(|w| *w = 0.0);
                return;
            }
            let a = row[j];
            let rad = (a * a + b * b).sqrt();
            let (c, s) = (a / rad, b / rad);
            row[j] = rad;
            self.work[j] = 0.0;
            for l in j + 1..k {
                let (x, y) = (row[l], self.work[l]);
                row[l] = c * x + s * y;
                self.work[l] = c * y - s * x;
            }
            let zj = self.z[j];
            self.z[j] = c * zj + s * beta;
            beta = c * beta - s * zj;
        }
    }

    fn solve(&self) -> Result<Vec<f64>, ElectricalError> {
        self.back_substitute(self.z.clone())
    }

    fn back_substitute(&self, mut x: Vec<f64>) -> Result<Vec<f64>, ElectricalError> {
        let k = self.k;
        for j in (0..k).rev() {
            let row = &self.r[j * k..(j + 1) * k];
            let mut v = x[j];
            for l in j + 1..k {
                v -= row[l] * x[l];
            }
            x[j] = v / row[j];
            if !x[j].is_finite() {
                return Err(ElectricalError::Factorization);
            }
        }
        Ok(x)
    }

    /// Solves R^T R x = b.
    fn solve_normal(&self, b: &[f64]) -> Result<Vec<f64>, ElectricalError> {
        let k = self.k;
        let mut y = b.to_vec();
        for j in 0..k {
            let mut v = y[j];
            for l in 0..j {
                v -= self.r[l * k + j] * y[l];
            }
            y[j] = v / self.r[j * k + j];
        }
        self.back_substitute(y)
    }
}

/// Correction flow for residual h with the state's resistances.
#[derive(Debug, Clone)]
pub struct CorrectionFlow {
    pub flow: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho_plus: Vec<f64>,
    pub rho_minus: Vec<f64>,
    pub energy: f64,
}

impl CorrectionFlow {
    pub fn rho_inf(&self) -> f64 {
        self.rho_plus
            .iter()
            .chain(&self.rho_minus)
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Solves B^T R^-1 B phi = -B^T R^-1 h and returns f = R^-1 (h + B phi) with
/// its congestion and energy.
pub fn correction_flow(
    net: &Network,
    state: &FlowState,
    h: &[f64],
) -> Result<CorrectionFlow, ElectricalError> {
    let r = state.resistances();
    let cond: Vec<f64> = r.iter().map(|x| 1.0 / x).collect();
    let (flow, phi) = net.weighted_projection(&cond, h)?;
    let sp = state.splus_f64();
    let sm = state.sminus_f64();
    let rho_plus: Vec<f64> = flow.iter().zip(&sp).map(|(f, s)| f / s).collect();
    let rho_minus: Vec<f64> = flow.iter().zip(&sm).map(|(f, s)| -f / s).collect();
    let wp = state.wplus_f64();
    let wm = state.wminus_f64();
    let mut energy = 0.0;
    for e in 0..flow.len() {
        energy += wp[e] * rho_plus[e] * rho_plus[e] + wm[e] * rho_minus[e] * rho_minus[e];
    }
    energy *= 0.5;
    Ok(CorrectionFlow { flow, phi, rho_plus, rho_minus, energy })
}

/// 1/2 sum w+ (rho+)^2 + w- (rho-)^2 for the correction flow of h.
pub fn energy(net: &Network, state: &FlowState, h: &[f64]) -> Result<f64, ElectricalError> {
    Ok(correction_flow(net, state, h)?.energy)
}

/// 1/2 sum h^2 / r, an upper bound on the energy that needs no solve.
pub fn emax(state: &FlowState, h: &[f64]) -> f64 {
    let r = state.resistances();
    0.5 * h.iter().zip(&r).map(|(x, r)| x * x / r).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_edge_potential_difference() {
        let net = Network::new(2, vec![0], vec![1]);
        let phi = net.solve_potentials(&[2.0], &[1.0, -1.0], 1e-12).unwrap();
        assert_abs_diff_eq!(phi[0] - phi[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_injection_gives_zero() {
        let net = Network::new(3, vec![0, 1], vec![1, 2]);
        let phi = net.solve_potentials(&[1.0, 1.0], &[0.0; 3], 1e-12).unwrap();
        assert_eq!(phi, vec![0.0; 3]);
    }

    #[test]
    fn triangle_matches_hand_solution() {
        // L = [[2,-1,-1],[-1,2,-1],[-1,-1,2]] maps (1,0,0) to (2,-1,-1),
        // so the pinned solution is (0,-1,-1).
        let net = Network::new(3, vec![0, 1, 0], vec![1, 2, 2]);
        let phi = net.solve_potentials(&[1.0; 3], &[2.0, -1.0, -1.0], 1e-12).unwrap();
        assert_abs_diff_eq!(phi[0], 0.0);
        assert_abs_diff_eq!(phi[1], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(phi[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn unbalanced_injection_is_rejected() {
        let net = Network::new(2, vec![0], vec![1]);
        assert!(matches!(
            net.solve_potentials(&[1.0], &[1.0, 0.0], 1e-12),
            Err(ElectricalError::Unbalanced(_))
        ));
    }

    #[test]
    fn cg_path_agrees_with_dense() {
        // A path plus chords on 250 vertices exercises the CG branch.
        let n = 250;
        let mut t = Vec::new();
        let mut h = Vec::new();
        for v in 0..n - 1 {
            t.push(v);
            h.push(v + 1);
        }
        for v in (0..n - 7).step_by(3) {
            t.push(v);
            h.push(v + 7);
        }
        let cond: Vec<f64> = (0..t.len()).map(|e| 1.0 + (e % 5) as f64).collect();
        let mut inj = vec![0.0; n];
        inj[3] = 2.0;
        inj[200] = -1.5;
        inj[111] = -0.5;
        let net = Network::new(n, t, h);
        let phi = net.solve_potentials(&cond, &inj, 1e-12).unwrap();
        let mut lphi = vec![0.0; n];
        net.apply_laplacian(&cond, &phi, &mut lphi);
        for v in 1..n {
            assert_abs_diff_eq!(lphi[v], inj[v], epsilon = 1e-8);
        }
    }

    #[test]
    fn projection_is_a_circulation_across_scales() {
        let net = Network::new(4, vec![0, 1, 2, 3, 0], vec![1, 2, 3, 0, 2]);
        let cond = [1.0, 1e-18, 1.0, 2e-17, 3.0];
        let h = [0.3, -2.0e9, 0.1, 5.0e8, -0.4];
        let (x, _) = net.weighted_projection(&cond, &h).unwrap();
        let d = net.divergence(&x);
        let scale = x.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        for v in d {
            assert!(v.abs() <= 1e-14 * scale.max(1.0));
        }
    }
}
