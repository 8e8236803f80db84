//! Dense oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use unitflow::mixed::SeparableObjective;

pub fn incidence(tail: &[usize], head: &[usize], n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(tail.len(), n);
    for e in 0..tail.len() {
        b[(e, head[e])] += 1.0;
        b[(e, tail[e])] -= 1.0;
    }
    b
}

/// Orthogonal projector onto the circulations ker(B^T) of a connected graph.
/// Dropping one vertex leaves B with full column rank.
pub fn circulation_projector(b: &DMatrix<f64>) -> DMatrix<f64> {
    let b = b.columns(1, b.ncols() - 1).into_owned();
    let gram = (b.transpose() * &b).cholesky().unwrap();
    DMatrix::identity(b.nrows(), b.nrows()) - &b * gram.solve(&b.transpose())
}

/// argmin 1/2 sum r x^2 - <h, x> subject to B^T x = 0, from the full KKT
/// system with vertex 0 pinned.
pub fn kkt_electrical(tail: &[usize], head: &[usize], n: usize, r: &[f64], h: &[f64]) -> Vec<f64> {
    let m = r.len();
    let b = incidence(tail, head, n).columns(1, n - 1).into_owned();
    let k = m + n - 1;
    let mut a = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for e in 0..m {
        a[(e, e)] = r[e];
        rhs[e] = h[e];
        for v in 0..n - 1 {
            a[(e, m + v)] = b[(e, v)];
            a[(m + v, e)] = b[(e, v)];
        }
    }
    let sol = a.lu().solve(&rhs).unwrap();
    sol.rows(0, m).iter().copied().collect()
}

/// Long-run projected gradient descent with backtracking.
pub fn projected_descent(obj: &SeparableObjective, proj: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let m = obj.len();
    let mut x = vec![0.0; m];
    let mut fx = obj.value(&x);
    let mut t = 1e-3;
    for _ in 0..200_000 {
        let g = DVector::from_vec(obj.grad(&x));
        let d = proj * g;
        let dn = d.norm_squared();
        if dn.sqrt() < 1e-13 {
            break;
        }
        loop {
            let trial: Vec<f64> = (0..m).map(|e| x[e] - t * d[e]).collect();
            let ft = obj.value(&trial);
            if ft <= fx - 0.5 * t * dn {
                x = trial;
                fx = ft;
                t *= 1.5;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return (x, fx);
            }
        }
    }
    (x, fx)
}

/// Largest relative mismatch between the analytic gradient and Hessian and
/// central differences.
pub fn derivative_error(obj: &SeparableObjective, x: &[f64]) -> f64 {
    let grad = obj.grad(x);
    let hess = obj.hess(x);
    let mut worst = 0.0f64;
    for e in 0..x.len() {
        let h = 1e-6 * (1.0 + x[e].abs());
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[e] += h;
        dn[e] -= h;
        let fd = (obj.value(&up) - obj.value(&dn)) / (2.0 * h);
        let fd2 = (obj.grad(&up)[e] - obj.grad(&dn)[e]) / (2.0 * h);
        worst = worst.max((fd - grad[e]).abs() / (1.0 + grad[e].abs()));
        worst = worst.max((fd2 - hess[e]).abs() / (1.0 + hess[e].abs()));
    }
    worst
}
