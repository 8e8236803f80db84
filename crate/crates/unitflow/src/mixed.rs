//! Step problems of the accelerated methods: a quadratic plus p-th power
//! objective over circulations, and the same with the quadratic replaced
//! by the extended-log barrier. Both live on the star-augmented graph.

use serde::Serialize;

use crate::electrical::{ElectricalError, Network};
use crate::graph::{Problem, StarGraph};
use crate::state::{to_f64, FlowState};

#[derive(Debug, thiserror::Error)]
pub enum MixedError {
    #[error(transparent)]
    Electrical(#[from] ElectricalError),
    #[error("solver stopped after {iterations} iterations with projected gradient {grad:e}")]
    NoConvergence { iterations: usize, grad: f64 },
    #[error("refinement increased the objective by {0:e}")]
    Increase(f64),
    #[error("step infeasible: {0}")]
    StepInfeasible(String),
}

/// The extended log is exact on [-THETA, THETA].
pub const THETA: f64 = 0.1;

/// Largest |ln(g''(x) / g''(0))| over the extended-log barrier terms.
pub fn alpha_bound() -> f64 {
    2.0 * ((1.0 + THETA) / (1.0 - THETA)).ln()
}

/// Extended log: log(1 + t) on [-θ, θ], continued by its second-order Taylor
/// polynomial at ±θ outside.
pub fn tilde_log(t: f64) -> f64 {
    if t > THETA {
        let a = 1.0 + THETA;
        let d = t - THETA;
        a.ln() + d / a - d * d / (2.0 * a * a)
    } else if t < -THETA {
        let a = 1.0 - THETA;
        let d = t + THETA;
        a.ln() + d / a - d * d / (2.0 * a * a)
    } else {
        t.ln_1p()
    }
}

/// First derivative of `tilde_log`.
pub fn tilde_log_d1(t: f64) -> f64 {
    if t > THETA {
        let a = 1.0 + THETA;
        1.0 / a - (t - THETA) / (a * a)
    } else if t < -THETA {
        let a = 1.0 - THETA;
        1.0 / a - (t + THETA) / (a * a)
    } else {
        1.0 / (1.0 + t)
    }
}

/// Second derivative of `tilde_log`.
pub fn tilde_log_d2(t: f64) -> f64 {
    let a = if t > THETA {
        1.0 + THETA
    } else if t < -THETA {
        1.0 - THETA
    } else {
        1.0 + t
    };
    -1.0 / (a * a)
}

/// tilde_log(t) - t, accurate for small t.
fn tilde_log_minus_t(t: f64) -> f64 {
    if t.abs() < 1e-3 {
        // -t^2/2 + t^3/3 - ... ; six terms reach full precision at |t| < 1e-3.
        let mut term = -t * t / 2.0;
        let mut sum = 0.0;
        let mut pow = t * t;
        for k in 2..8 {
            term = if k % 2 == 0 { -pow / k as f64 } else { pow / k as f64 };
            sum += term;
            pow *= t;
        }
        let _ = term;
        sum
    } else {
        tilde_log(t) - t
    }
}

/// tilde_log'(t) - 1, accurate for small t.
fn tilde_log_d1_minus_1(t: f64) -> f64 {
    if t.abs() <= THETA {
        -t / (1.0 + t)
    } else {
        tilde_log_d1(t) - 1.0
    }
}

/// Average of -tilde_log'' over the segment [0, t]: (1 - tilde_log'(t)) / t.
pub fn average_curvature(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        -tilde_log_d1_minus_1(t) / t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegParams {
    pub p: u32,
    pub r_p: f64,
    pub r_star: f64,
    pub delta: f64,
    /// Constant in front of delta^2 ||w||_1 log ||w||_1 inside R_p.
    pub kappa: f64,
}

impl RegParams {
    /// kappa delta^2 ||w||_1 ln ||w||_1.
    pub fn base(&self, norm_w1: f64) -> f64 {
        self.kappa * self.delta * self.delta * norm_w1 * norm_w1.ln()
    }
}

/// Smallest even p >= (ln m)^(1/3), at least 4.
pub fn choose_p(m: f64) -> u32 {
    let raw = m.max(1.0).ln().cbrt();
    let mut p = raw.ceil() as u32;
    if p % 2 == 1 {
        p += 1;
    }
    p.max(4)
}

/// R_p = p (kappa delta^2 ||w|| ln ||w||)^(p+1) and R* = 3 delta^2 ||w||^2.
pub fn choose_params(norm_w1: f64, m: f64, delta: f64, kappa: f64) -> RegParams {
    let p = choose_p(m);
    let base = kappa * delta * delta * norm_w1 * norm_w1.ln();
    RegParams {
        p,
        r_p: p as f64 * base.powi(p as i32 + 1),
        r_star: 3.0 * delta * delta * norm_w1 * norm_w1,
        delta,
        kappa,
    }
}

fn powp(x: f64, p: u32) -> f64 {
    x.powi(p as i32)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-edge barrier pair -w+ tlog(1 - x/s+) - w- tlog(1 + x/s-) together
/// with the linear term -(w+/s+ - w-/s-) x that cancels its slope at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierPair {
    pub wplus: f64,
    pub wminus: f64,
    pub splus: f64,
    pub sminus: f64,
}

impl BarrierPair {
    fn value(&self, x: f64) -> f64 {
        let tp = -x / self.splus;
        let tm = x / self.sminus;
        -self.wplus * tilde_log_minus_t(tp) - self.wminus * tilde_log_minus_t(tm)
    }

    fn grad(&self, x: f64) -> f64 {
        let tp = -x / self.splus;
        let tm = x / self.sminus;
        self.wplus / self.splus * tilde_log_d1_minus_1(tp)
            - self.wminus / self.sminus * tilde_log_d1_minus_1(tm)
    }

    fn hess(&self, x: f64) -> f64 {
        let tp = -x / self.splus;
        let tm = x / self.sminus;
        -self.wplus / (self.splus * self.splus) * tilde_log_d2(tp)
            - self.wminus / (self.sminus * self.sminus) * tilde_log_d2(tm)
    }
}

/// Separable convex objective to minimize over circulations:
/// sum_e -g_e x_e + q_e x_e^2 / 2 + barrier_e(x_e) + lam_e x_e^p / p.
#[derive(Debug, Clone)]
pub struct SeparableObjective {
    pub g: Vec<f64>,
    pub q: Vec<f64>,
    pub barrier: Vec<Option<BarrierPair>>,
    pub lam: Vec<f64>,
    pub p: u32,
}

impl SeparableObjective {
    pub fn quad_plus_p(g: Vec<f64>, q: Vec<f64>, lam: Vec<f64>, p: u32) -> Self {
        let barrier = vec![None; g.len()];
        SeparableObjective { g, q, barrier, lam, p }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let p = self.p;
        (0..self.len())
            .map(|e| {
                let b = self.barrier[e].map_or(0.0, |b| b.value(x[e]));
                -self.g[e] * x[e] + 0.5 * self.q[e] * x[e] * x[e] + b + self.lam[e] * powp(x[e], p) / p as f64
            })
            .sum()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|e| {
                let b = self.barrier[e].map_or(0.0, |b| b.grad(x[e]));
                -self.g[e] + self.q[e] * x[e] + b + self.lam[e] * powp(x[e], self.p - 1)
            })
            .collect()
    }

    /// Curvature of everything except the p-th power terms.
    pub fn smooth_hess(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|e| self.q[e] + self.barrier[e].map_or(0.0, |b| b.hess(x[e])))
            .collect()
    }

    pub fn hess(&self, x: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut h = self.smooth_hess(x);
        for e in 0..self.len() {
            h[e] += self.lam[e] * (p - 1) as f64 * powp(x[e], p - 2);
        }
        h
    }
}

/// Unit-weight least-squares residual of the gradient: the part that no
/// potential can explain.
pub fn projected_gradient(net: &Network, grad: &[f64]) -> Result<f64, ElectricalError> {
    let (_, perp) = net.least_squares(grad)?;
    Ok(inf_norm(&perp))
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadPSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub proj_grad: f64,
    pub objective: f64,
}

pub const MAX_NEWTON: usize = 500;

/// Minimizes a convex separable objective over circulations by damped
/// Newton steps: each step is an electrical flow with conductances equal to
/// the inverse curvature, followed by a backtracking line search.
///
/// Stops once the unit-weight projected gradient is at most
/// tol (||g||_inf + 1).
pub fn newton_minimize(
    net: &Network,
    obj: &SeparableObjective,
    start: Vec<f64>,
    tol: f64,
) -> Result<QuadPSolution, MixedError> {
    let mut x = start;
    let scale = tol * (inf_norm(&obj.g) + 1.0);
    let mut fx = obj.value(&x);
    let mut pg = f64::INFINITY;
    for it in 0..MAX_NEWTON {
        let grad = obj.grad(&x);
        pg = if inf_norm(&grad) <= scale { inf_norm(&grad) } else { projected_gradient(net, &grad)? };
        if pg <= scale {
            return Ok(QuadPSolution { x, iterations: it, proj_grad: pg, objective: fx });
        }
        let hess = obj.hess(&x);
        let cond: Vec<f64> = hess.iter().map(|h| 1.0 / h).collect();
        let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
        let (d, _) = net.weighted_projection(&cond, &neg)?;
        // Newton decrement: twice the predicted decrease.
        let dec = -dot(&grad, &d);
        if dec <= 1e-13 * (1.0 + fx.abs()) {
            // The decrease is below what the objective can resolve; the
            // quadratic model is exact to that order, so take the full step.
            for (a, b) in x.iter_mut().zip(&d) {
                *a += b;
            }
            fx = obj.value(&x);
            continue;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let ft = obj.value(&trial);
            if ft <= fx - 1e-4 * t * dec {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(MixedError::NoConvergence { iterations: it, grad: pg });
        }
    }
    Err(MixedError::NoConvergence { iterations: MAX_NEWTON, grad: pg })
}

/// argmax <g, x> - 1/2 sum q x^2 - sum lam x^p / p over circulations.
pub fn solve_quad_plus_p(
    net: &Network,
    g: &[f64],
    q: &[f64],
    lam: &[f64],
    p: u32,
    tol: f64,
) -> Result<QuadPSolution, MixedError> {
    let obj = SeparableObjective::quad_plus_p(g.to_vec(), q.to_vec(), lam.to_vec(), p);
    newton_minimize(net, &obj, vec![0.0; g.len()], tol)
}

/// Constants of the refinement loop.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RefineConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Exponent constant c in 2^(-c p).
    pub c: f64,
    pub max_rounds: usize,
}

impl RefineConfig {
    pub fn for_p(p: u32) -> Self {
        RefineConfig {
            beta: alpha_bound().exp().max(2f64.powi(p as i32)),
            gamma: 1.01,
            c: 2.0,
            max_rounds: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RefineInfo {
    pub before: f64,
    pub after: f64,
    pub scaling: f64,
}

/// One round of iterative refinement.
///
/// The model k(d) is the curvature of the smooth part at x plus
/// 2^(-cp) lam (x^(p-2) d^2 + d^p) / p for the p-th powers. The model
/// minimizer d is tried at scalings 1, 1/2, ..., 1/beta and e^(-2 alpha);
/// the best candidate is kept, and the round fails if none decreases the
/// objective.
pub fn refine_once(
    net: &Network,
    obj: &SeparableObjective,
    x: &[f64],
    cfg: &RefineConfig,
    tol: f64,
) -> Result<(Vec<f64>, RefineInfo), MixedError> {
    let p = obj.p;
    let shrink = 2f64.powf(-cfg.c * p as f64);
    let grad = obj.grad(x);
    let mut q = obj.smooth_hess(x);
    let mut lam = vec![0.0; obj.len()];
    for e in 0..obj.len() {
        q[e] += 2.0 * shrink * obj.lam[e] * powp(x[e], p - 2) / p as f64;
        lam[e] = shrink * obj.lam[e];
    }
    let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
    let model = SeparableObjective::quad_plus_p(neg, q, lam, p);
    let d = newton_minimize(net, &model, vec![0.0; x.len()], tol)?.x;
    let before = obj.value(x);
    let mut scalings = vec![1.0];
    while *scalings.last().unwrap() > 1.0 / cfg.beta {
        let s = scalings.last().unwrap() / 2.0;
        scalings.push(s.max(1.0 / cfg.beta));
    }
    scalings.push((-2.0 * alpha_bound()).exp());
    let mut best = (before, 0.0);
    for &s in &scalings {
        let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
        let v = obj.value(&trial);
        if v < best.0 {
            best = (v, s);
        }
    }
    let (after, scaling) = best;
    let next = x.iter().zip(&d).map(|(a, b)| a + scaling * b).collect();
    Ok((next, RefineInfo { before, after, scaling }))
}

/// Repeats `refine_once` until the projected gradient is at most
/// tol (||g||_inf + 1) or a round makes no progress.
pub fn refine_minimize(
    net: &Network,
    obj: &SeparableObjective,
    cfg: &RefineConfig,
    tol: f64,
) -> Result<(QuadPSolution, Vec<RefineInfo>), MixedError> {
    let mut x = vec![0.0; obj.len()];
    let scale = tol * (inf_norm(&obj.g) + 1.0);
    let mut log = Vec::new();
    let mut pg = f64::INFINITY;
    for round in 0..cfg.max_rounds {
        let grad = obj.grad(&x);
        pg = if inf_norm(&grad) <= scale { inf_norm(&grad) } else { projected_gradient(net, &grad)? };
        if pg <= scale {
            let objective = obj.value(&x);
            return Ok((QuadPSolution { x, iterations: round, proj_grad: pg, objective }, log));
        }
        let (next, info) = refine_once(net, obj, &x, cfg, tol)?;
        if info.after > info.before {
            return Err(MixedError::Increase(info.after - info.before));
        }
        log.push(info);
        if info.scaling == 0.0 {
            // Stationary to working precision.
            let objective = obj.value(&x);
            return Ok((QuadPSolution { x, iterations: round, proj_grad: pg, objective }, log));
        }
        x = next;
    }
    Err(MixedError::NoConvergence { iterations: cfg.max_rounds, grad: pg })
}

/// G* with the parallel star edges at each vertex bundled into one edge
/// v -> v*. A bundle of k parallel edges carrying F in total has each edge at
/// F / k, so its quadratic and p-th power coefficients become R*/k and
/// R_p / k^(p-1).
#[derive(Debug, Clone)]
pub struct StarNetwork {
    pub net: Network,
    pub m: usize,
    /// Base vertex of each bundled star edge, in edge order after E.
    pub vertices: Vec<usize>,
}

impl StarNetwork {
    pub fn new(p: &Problem) -> Self {
        let star = p.n;
        let mut tail = p.tails();
        let mut head = p.heads();
        let mut deg = vec![0usize; p.n];
        for a in &p.arcs {
            deg[a.tail] += 1;
            deg[a.head] += 1;
        }
        let vertices: Vec<usize> = (0..p.n).filter(|&v| deg[v] > 0).collect();
        for &v in &vertices {
            tail.push(v);
            head.push(star);
        }
        StarNetwork { net: Network::new(p.n + 1, tail, head), m: p.m(), vertices }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSolution {
    /// Step on the arcs of G.
    pub flow: Vec<f64>,
    /// Total flow on each vertex's star bundle, indexed by vertex.
    pub star_flow: Vec<f64>,
    /// Number of parallel star edges per vertex.
    pub star_counts: Vec<u64>,
    pub rho_plus: Vec<f64>,
    pub rho_minus: Vec<f64>,
    /// -R_p flow^(p-1) on the arcs of G.
    pub dh: Vec<f64>,
    /// Demand routed by `flow` in G.
    pub demand: Vec<f64>,
    pub objective: f64,
    pub proj_grad: f64,
    pub iterations: usize,
    /// ||f*||_p over all edges of G*, star bundles expanded.
    pub lp_norm: f64,
    /// Average extended-log curvatures along the step (barrier steps only).
    pub alpha: Option<(Vec<f64>, Vec<f64>)>,
    pub emax: f64,
}

impl StepSolution {
    pub fn rho_inf(&self) -> f64 {
        inf_norm(&self.rho_plus).max(inf_norm(&self.rho_minus))
    }

    pub fn demand_l1(&self) -> f64 {
        self.demand.iter().map(|x| x.abs()).sum()
    }

    pub fn dh_l1(&self) -> f64 {
        self.dh.iter().map(|x| x.abs()).sum()
    }

    /// ||flow / min(f, 1 - f)||_inf.
    pub fn congestion(&self) -> f64 {
        self.rho_inf()
    }
}

fn star_coefficients(star: &StarGraph, sn: &StarNetwork, params: &RegParams) -> (Vec<f64>, Vec<f64>) {
    let p = params.p as i32;
    let mut q = Vec::with_capacity(sn.vertices.len());
    let mut lam = Vec::with_capacity(sn.vertices.len());
    for &v in &sn.vertices {
        let k = star.counts[v].max(1) as f64;
        q.push(params.r_star / k);
        lam.push(params.r_p / k.powi(p - 1));
    }
    (q, lam)
}

fn assemble(
    pr: &Problem,
    st: &FlowState,
    star: &StarGraph,
    sn: &StarNetwork,
    params: &RegParams,
    sol: QuadPSolution,
    emax: f64,
) -> StepSolution {
    let m = sn.m;
    let flow = sol.x[..m].to_vec();
    let mut star_flow = vec![0.0; pr.n];
    for (i, &v) in sn.vertices.iter().enumerate() {
        star_flow[v] = sol.x[m + i];
    }
    let sp = st.splus_f64();
    let sm = st.sminus_f64();
    let rho_plus: Vec<f64> = (0..m).map(|e| flow[e] / sp[e]).collect();
    let rho_minus: Vec<f64> = (0..m).map(|e| -flow[e] / sm[e]).collect();
    let p = params.p;
    let dh: Vec<f64> = flow.iter().map(|&x| -params.r_p * powp(x, p - 1)).collect();
    let demand = pr.divergence(&flow);
    let mut lp = flow.iter().map(|&x| powp(x, p)).sum::<f64>();
    for &v in &sn.vertices {
        let k = star.counts[v].max(1) as f64;
        lp += k * powp(star_flow[v] / k, p);
    }
    StepSolution {
        flow,
        star_flow,
        star_counts: star.counts.clone(),
        rho_plus,
        rho_minus,
        dh,
        demand,
        objective: -sol.objective,
        proj_grad: sol.proj_grad,
        iterations: sol.iterations,
        lp_norm: lp.powf(1.0 / p as f64),
        alpha: None,
        emax,
    }
}

fn emax_of(st: &FlowState, h: &[f64]) -> f64 {
    crate::electrical::emax(st, h)
}

/// Regularized Newton step for residual h:
/// max <h, f> - 1/2 sum r f^2 - R*/2 sum_{E'} f^2 - R_p/p sum_{E ∪ E'} f^p.
///
/// Rejects the step when its congestion exceeds 1/2 or its demand, Δh or
/// p-norm exceed their bounds.
pub fn solve_regularized_step(
    pr: &Problem,
    st: &FlowState,
    star: &StarGraph,
    sn: &StarNetwork,
    h: &[f64],
    params: &RegParams,
    tol: f64,
) -> Result<StepSolution, MixedError> {
    let m = pr.m();
    let (sq, slam) = star_coefficients(star, sn, params);
    let mut g = h.to_vec();
    g.extend(std::iter::repeat(0.0).take(sn.vertices.len()));
    let mut q = st.resistances();
    q.extend(sq);
    let mut lam = vec![params.r_p; m];
    lam.extend(slam);
    let sol = solve_quad_plus_p(&sn.net, &g, &q, &lam, params.p, tol)?;
    let step = assemble(pr, st, star, sn, params, sol, emax_of(st, h));
    check_regularized(st, &step, params)?;
    Ok(step)
}

fn check_regularized(st: &FlowState, step: &StepSolution, params: &RegParams) -> Result<(), MixedError> {
    let wn = st.norm_w1();
    let rho = step.rho_inf();
    if rho > 0.5 {
        return Err(MixedError::StepInfeasible(format!("congestion {rho:.3} > 1/2")));
    }
    let d = step.demand_l1();
    let d_bound = (6.0 * wn * step.emax / params.r_star).sqrt();
    if d > 1.0 + 1e-9 || d > d_bound * (1.0 + 1e-6) + 1e-12 {
        return Err(MixedError::StepInfeasible(format!(
            "demand perturbation {d:.3e} exceeds min(1, {d_bound:.3e})"
        )));
    }
    let dh_bound = params.p as f64 * wn.powf(1.0 / params.p as f64) * params.base(wn).powi(2);
    if step.dh_l1() > dh_bound * (1.0 + 1e-6) {
        return Err(MixedError::StepInfeasible(format!(
            "||Δh||_1 = {:.3e} exceeds {dh_bound:.3e}",
            step.dh_l1()
        )));
    }
    Ok(())
}

/// Barrier step at mu / (1 + delta):
/// max (1+δ)<w+/s+ - w-/s-, f> + sum w+ tlog(1 - f/s+) + w- tlog(1 + f/s-)
///     - R*/2 sum_{E'} f^2 - R_p/p sum_{E ∪ E'} f^p,
/// solved by iterative refinement.
///
/// Rejects the step unless ||f / min(s+, s-)||_inf <= 1/10, where the
/// extended log agrees with the log, and the routed demand is at most 3/2.
pub fn solve_barrier_step(
    pr: &Problem,
    st: &FlowState,
    star: &StarGraph,
    sn: &StarNetwork,
    params: &RegParams,
    tol: f64,
) -> Result<StepSolution, MixedError> {
    let m = pr.m();
    let (sq, slam) = star_coefficients(star, sn, params);
    let bt = st.barrier_terms();
    let h: Vec<f64> = bt.iter().map(|&b| params.delta * to_f64(b)).collect();
    let mut g = h.clone();
    g.extend(std::iter::repeat(0.0).take(sn.vertices.len()));
    let mut q = vec![0.0; m];
    q.extend(sq);
    let mut barrier: Vec<Option<BarrierPair>> = (0..m)
        .map(|e| {
            Some(BarrierPair {
                wplus: to_f64(st.wplus[e]),
                wminus: to_f64(st.wminus[e]),
                splus: to_f64(st.splus(e)),
                sminus: to_f64(st.sminus(e)),
            })
        })
        .collect();
    barrier.extend(std::iter::repeat(None).take(sn.vertices.len()));
    let mut lam = vec![params.r_p; m];
    lam.extend(slam);
    let obj = SeparableObjective { g, q, barrier, lam, p: params.p };
    let cfg = RefineConfig::for_p(params.p);
    let (sol, _) = refine_minimize(&sn.net, &obj, &cfg, tol)?;
    let mut step = assemble(pr, st, star, sn, params, sol, emax_of(st, &h));
    let ap: Vec<f64> = step.rho_plus.iter().map(|&r| average_curvature(-r)).collect();
    let am: Vec<f64> = step.rho_minus.iter().map(|&r| average_curvature(-r)).collect();
    step.alpha = Some((ap, am));
    let c = step.congestion();
    if c > 0.1 {
        return Err(MixedError::StepInfeasible(format!("congestion {c:.3} > 1/10")));
    }
    let d = step.demand_l1();
    let wn = st.norm_w1();
    let d_bound = 3.0 * (wn * step.emax / params.r_star).sqrt();
    if d > 1.5 + 1e-9 || d > d_bound * (1.0 + 1e-6) + 1e-12 {
        return Err(MixedError::StepInfeasible(format!(
            "demand perturbation {d:.3e} exceeds min(3/2, {d_bound:.3e})"
        )));
    }
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tilde_log_values() {
        assert_eq!(tilde_log(0.0), 0.0);
        assert_abs_diff_eq!(tilde_log(0.05), 1.05f64.ln(), epsilon = 1e-16);
        let expect = 1.1f64.ln() + 0.1 / 1.1 - 0.01 / (2.0 * 1.21);
        assert_abs_diff_eq!(tilde_log(0.2), expect, epsilon = 1e-15);
    }

    #[test]
    fn tilde_log_minus_t_matches_direct_formula() {
        for &t in &[1e-4f64, -3e-4, 9e-4, -9e-4] {
            let direct = t.ln_1p() - t;
            assert!((tilde_log_minus_t(t) - direct).abs() <= 1e-12 * direct.abs());
        }
    }

    #[test]
    fn choose_params_examples() {
        let rp = choose_params(100.0, 10.0, 0.1, 100.0);
        assert_abs_diff_eq!(rp.r_star, 300.0, epsilon = 1e-9);
        assert_eq!(choose_p(256.0), 4);
        assert_eq!(choose_p(64f64.exp()), 4);
        assert_eq!(choose_p(200f64.exp()), 6);
    }

    #[test]
    fn two_cycle_p_power() {
        let net = Network::new(2, vec![0, 1], vec![1, 0]);
        let sol = solve_quad_plus_p(&net, &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 4, 1e-12).unwrap();
        // Root of 2 - 2t - 2t^3.
        let mut t: f64 = 0.5;
        for _ in 0..50 {
            t -= (1.0 - t - t * t * t) / (-1.0 - 3.0 * t * t);
        }
        assert_abs_diff_eq!(sol.x[0], t, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.x[1], t, epsilon = 1e-10);
        assert!((1.0 - t - t * t * t).abs() < 1e-14);
    }

    #[test]
    fn zero_linear_term_gives_zero() {
        let net = Network::new(2, vec![0, 1], vec![1, 0]);
        let sol = solve_quad_plus_p(&net, &[0.0, 0.0], &[1.0, 2.0], &[1.0, 1.0], 4, 1e-12).unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
    }

    #[test]
    fn average_curvature_is_within_alpha_range() {
        let lo = (1.0 + THETA).powi(-2);
        let hi = (1.0 - THETA).powi(-2);
        for i in -100..=100 {
            let t = i as f64 / 50.0;
            let a = average_curvature(t);
            assert!(a >= lo - 1e-12 && a <= hi + 1e-12, "t={t} a={a}");
        }
    }
}
