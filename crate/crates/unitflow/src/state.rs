//! The interior point iterate.
//!
//! Flows, weights, mu and the dual potentials are stored in double-double
//! precision. Near termination the slacks are ~1e-10 while the barrier
//! gradient is ~1e10; the centrality residual is the small difference of
//! such terms and does not survive plain f64 arithmetic.

use twofloat::TwoFloat;

use crate::graph::Problem;

pub type Dd = TwoFloat;

pub fn dd(x: f64) -> Dd {
    Dd::from(x)
}

pub fn to_f64(x: Dd) -> f64 {
    f64::from(x)
}

/// a / b to double-double accuracy.
///
/// twofloat's own `TwoFloat / TwoFloat` forms the reciprocal residual
/// 1 - b.hi * (1 / b.hi) without a fused multiply-add, which rounds it to zero
/// and leaves the quotient with plain f64 accuracy.
pub fn ddiv(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    Dd::new_add(q1, q2) + q3
}

#[derive(Debug, Clone)]
pub struct FlowState {
    /// Flow per arc, strictly inside (0, 1). The lower slack is `f`, the upper
    /// slack `1 - f`.
    pub f: Vec<Dd>,
    pub wplus: Vec<Dd>,
    pub wminus: Vec<Dd>,
    pub mu: Dd,
    /// Tracked dual potentials, scaled by mu: c + mu w+/s+ - mu w-/s- is kept
    /// close to B psi.
    pub psi: Vec<Dd>,
}

impl FlowState {
    /// f = 1/2 and w = 1 everywhere.
    pub fn halves(n: usize, m: usize, mu: f64) -> Self {
        FlowState {
            f: vec![dd(0.5); m],
            wplus: vec![dd(1.0); m],
            wminus: vec![dd(1.0); m],
            mu: dd(mu),
            psi: vec![dd(0.0); n],
        }
    }

    pub fn m(&self) -> usize {
        self.f.len()
    }

    pub fn splus(&self, e: usize) -> Dd {
        1.0 - self.f[e]
    }

    pub fn sminus(&self, e: usize) -> Dd {
        self.f[e]
    }

    pub fn flow_f64(&self) -> Vec<f64> {
        self.f.iter().map(|&x| to_f64(x)).collect()
    }

    pub fn splus_f64(&self) -> Vec<f64> {
        (0..self.m()).map(|e| to_f64(self.splus(e))).collect()
    }

    pub fn sminus_f64(&self) -> Vec<f64> {
        self.flow_f64()
    }

    pub fn wplus_f64(&self) -> Vec<f64> {
        self.wplus.iter().map(|&x| to_f64(x)).collect()
    }

    pub fn wminus_f64(&self) -> Vec<f64> {
        self.wminus.iter().map(|&x| to_f64(x)).collect()
    }

    pub fn mu_f64(&self) -> f64 {
        to_f64(self.mu)
    }

    pub fn norm_w1(&self) -> f64 {
        to_f64(self.norm_w1_dd())
    }

    pub fn norm_w1_dd(&self) -> Dd {
        let mut s = dd(0.0);
        for e in 0..self.m() {
            s += self.wplus[e] + self.wminus[e];
        }
        s
    }

    pub fn min_weight(&self) -> f64 {
        self.wplus
            .iter()
            .chain(&self.wminus)
            .map(|&x| to_f64(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_slack(&self) -> f64 {
        (0..self.m())
            .map(|e| to_f64(self.splus(e)).min(to_f64(self.sminus(e))))
            .fold(f64::INFINITY, f64::min)
    }

    /// Duality gap mu ||w||_1 of a central state.
    pub fn gap(&self) -> f64 {
        to_f64(self.mu * self.norm_w1_dd())
    }

    /// w+/s+ - w-/s- per arc.
    pub fn barrier_terms(&self) -> Vec<Dd> {
        (0..self.m())
            .map(|e| ddiv(self.wplus[e], self.splus(e)) - ddiv(self.wminus[e], self.sminus(e)))
            .collect()
    }

    /// r = w+/(s+)^2 + w-/(s-)^2 per arc.
    pub fn resistances(&self) -> Vec<f64> {
        (0..self.m())
            .map(|e| {
                let sp = to_f64(self.splus(e));
                let sm = to_f64(self.sminus(e));
                to_f64(self.wplus[e]) / (sp * sp) + to_f64(self.wminus[e]) / (sm * sm)
            })
            .collect()
    }

    /// Residual of the centrality condition at parameter `mu` relative to the
    /// tracked potentials and an optional shift:
    /// w+/s+ - w-/s- + (c - B psi)/mu - shift.
    ///
    /// The state is central at `mu` (up to the shift) when this lies in Im(B).
    pub fn residual_at(&self, p: &Problem, mu: Dd, shift: Option<&[Dd]>) -> Vec<Dd> {
        let mut r = self.barrier_terms();
        for (e, a) in p.arcs.iter().enumerate() {
            let red = dd(a.cost as f64) - (self.psi[a.head] - self.psi[a.tail]);
            r[e] += ddiv(red, mu);
            if let Some(s) = shift {
                r[e] -= s[e];
            }
        }
        r
    }

    /// Full barrier gradient w+/s+ - w-/s- + c/mu.
    pub fn gradient(&self, p: &Problem) -> Vec<Dd> {
        let mut g = self.barrier_terms();
        for (e, a) in p.arcs.iter().enumerate() {
            g[e] += ddiv(dd(a.cost as f64), self.mu);
        }
        g
    }

    /// B^T f evaluated in double-double.
    pub fn divergence(&self, p: &Problem) -> Vec<Dd> {
        let mut d = vec![dd(0.0); p.n];
        for (e, a) in p.arcs.iter().enumerate() {
            d[a.head] += self.f[e];
            d[a.tail] -= self.f[e];
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn division_is_double_double_accurate() {
        let third = ddiv(dd(1.0), dd(3.0));
        assert!(to_f64(third * 3.0 - 1.0).abs() < 1e-31);
        let x = ddiv(dd(2.0), dd(7.0) + dd(1e-20));
        let back = x * (dd(7.0) + dd(1e-20)) - 2.0;
        assert!(to_f64(back).abs() < 1e-31);
    }
}
