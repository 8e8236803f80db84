//! Accelerated outer loops: weight balancing, the regularized progress step
//! with perturbed residual correction, the direct barrier progress step, and
//! bookkeeping of the demand the maintained flow actually routes.

use serde::Serialize;

use crate::graph::{build_star_graph, Problem};
use crate::ipm::{absorb_into_weights, predictor_residual, Ipm, IpmError};
use crate::mixed::{
    choose_params, solve_barrier_step, solve_regularized_step, MixedError, RegParams, StarNetwork, StepSolution,
};
use crate::state::{dd, ddiv, to_f64, Dd, FlowState};

#[derive(Debug, thiserror::Error)]
pub enum AccelError {
    #[error(transparent)]
    Ipm(#[from] IpmError),
    #[error(transparent)]
    Mixed(#[from] MixedError),
    #[error("bound violated: {0}")]
    Bound(String),
    #[error("demand ledger out of sync by {0:e}")]
    Ledger(f64),
    #[error("weight budget exceeded: ||w||_1 = {norm} > 3m = {limit}")]
    Budget { norm: f64, limit: f64 },
    #[error("step rejected at delta {delta:e} and delta/2: {reason}")]
    Rejected { delta: f64, reason: String },
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eleven8,
    Four3,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AccelConfig {
    pub method: Method,
    /// Multiplies the default delta schedule.
    pub delta_scale: f64,
    /// Constant inside R_p = p (kappa delta^2 ||w|| ln ||w||)^(p+1).
    pub reg_scale: f64,
    /// Relative projected-gradient tolerance of the step solvers.
    pub step_tol: f64,
    pub max_iters: usize,
}

impl AccelConfig {
    pub fn new(method: Method) -> Self {
        AccelConfig { method, delta_scale: 1.0, reg_scale: 100.0, step_tol: 1e-11, max_iters: 1_000_000 }
    }
}

/// m^(-3/8) / (10 ln m) or m^(-1/3) / (10 ln m), scaled, and capped at
/// ||w||_1^(-1/4) / 2.
pub fn schedule_delta(method: Method, m: usize, norm_w1: f64, delta_scale: f64) -> f64 {
    let m = (m as f64).max(3.0);
    let exp = match method {
        Method::Eleven8 => -3.0 / 8.0,
        Method::Four3 => -1.0 / 3.0,
    };
    let base = m.powf(exp) / (10.0 * m.ln()) * delta_scale;
    base.min(norm_w1.powf(-0.25) / 2.0)
}

/// Congestion threshold 1 / (2 delta sqrt(2 ||w||_1)) above which the
/// perturbed correction reweights an edge.
pub fn congestion_threshold(delta: f64, norm_w1: f64) -> f64 {
    1.0 / (2.0 * delta * (2.0 * norm_w1).sqrt())
}

/// delta^2 ||w||_1 32 sqrt(6) log ||w||_1.
pub fn gamma_bound(delta: f64, norm_w1: f64) -> f64 {
    delta * delta * norm_w1 * 32.0 * 6f64.sqrt() * norm_w1.ln()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationRecord {
    pub delta: f64,
    pub rho_inf: f64,
    pub dw_balance: f64,
    pub dw_congested: f64,
    pub dw_absorb: f64,
    pub dw_perfect: f64,
    /// ||d~||_1 of the step plus the balancing perturbation.
    pub demand_l1: f64,
    pub balanced_edges: usize,
    /// Energy of the shifted residual right after the step.
    pub start_energy: f64,
    /// Arcs violating the congested-or-small-gradient dichotomy.
    pub dichotomy_violations: usize,
    pub solver_iterations: usize,
    pub dh_l1: f64,
    /// ||w||_1 and p the step was solved with, after balancing.
    pub norm_w: f64,
    pub p: u32,
    pub kappa: f64,
    /// ||d~||_1 of the step alone.
    pub step_demand_l1: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AccelDiagnostics {
    pub records: Vec<IterationRecord>,
    pub balancing_events: usize,
    pub retries: usize,
    pub max_norm_w: f64,
    /// Smallest delta of the schedule, which sets the balancing budget.
    pub min_delta: f64,
    /// Whether every scheduled delta exceeded ||w||_1^(-1/2).
    pub delta_above_lower_bound: bool,
    /// Largest |B^T f - d_cur| seen at a checkpoint.
    pub max_ledger_mismatch: f64,
    /// Smallest per-arc weight change over an accepted step.
    pub min_weight_change: f64,
}

impl AccelDiagnostics {
    pub fn total_demand_perturbation(&self) -> f64 {
        self.records.iter().map(|r| r.demand_l1).sum()
    }
}

/// Demand routed by the maintained flow, against the original demand.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbedDemand {
    pub current: Vec<f64>,
    pub original: Vec<f64>,
}

impl PerturbedDemand {
    pub fn new(original: Vec<f64>) -> Self {
        PerturbedDemand { current: original.clone(), original }
    }

    pub fn add(&mut self, delta: &[f64]) {
        for (c, d) in self.current.iter_mut().zip(delta) {
            *c += d;
        }
    }

    pub fn l1(&self) -> f64 {
        self.current.iter().zip(&self.original).map(|(a, b)| (a - b).abs()).sum()
    }

    /// max |B^T f - d_cur|.
    pub fn mismatch(&self, p: &Problem, st: &FlowState) -> f64 {
        st.divergence(p)
            .iter()
            .zip(&self.current)
            .fold(0.0f64, |a, (&x, &c)| a.max((to_f64(x) - c).abs()))
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BalanceOutcome {
    pub dw: f64,
    /// Demand change caused by re-solving flows.
    pub demand: Vec<f64>,
    pub demand_l1: f64,
    pub edges: Vec<usize>,
}

/// g(t) = w+/(1 - t) - w-/t.
fn stationarity(wp: Dd, wm: Dd, t: Dd) -> Dd {
    ddiv(wp, 1.0 - t) - ddiv(wm, t)
}

/// Root of w+/(1 - t) - w-/t = v on (0, 1): bisection, then Newton steps in
/// double-double.
fn solve_flow_for(wp: Dd, wm: Dd, v: Dd) -> Result<Dd, AccelError> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if stationarity(wp, wm, dd(mid)) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if !(hi - lo <= 1e-14) {
        return Err(AccelError::Bound(format!("balancing root find ended on [{lo}, {hi}]")));
    }
    let mut t = dd(0.5 * (lo + hi));
    for _ in 0..3 {
        let g = stationarity(wp, wm, t) - v;
        let d = ddiv(wp, (1.0 - t) * (1.0 - t)) + ddiv(wm, t * t);
        let next = t - ddiv(g, d);
        if next <= dd(0.0) || next >= dd(1.0) {
            break;
        }
        t = next;
    }
    Ok(t)
}

/// Raises the smaller weight of every imbalanced arc to 96 delta^4 ||w||^2
/// and moves its flow so that w+/(1-f) - w-/f keeps its value, which keeps
/// the state exactly central. An arc is balanced when
/// max(w+, w-) <= delta ||w|| or min(w+, w-) >= 96 delta^4 ||w||^2.
pub fn balance_weights(p: &Problem, st: &mut FlowState, delta: f64) -> Result<BalanceOutcome, AccelError> {
    let wn = st.norm_w1();
    let upper = delta * wn;
    let floor = 96.0 * delta.powi(4) * wn * wn;
    let mut out = BalanceOutcome { demand: vec![0.0; p.n], ..BalanceOutcome::default() };
    for e in 0..st.m() {
        let (wp, wm) = (st.wplus[e], st.wminus[e]);
        let (a, b) = (to_f64(wp), to_f64(wm));
        if a.max(b) <= upper || a.min(b) >= floor {
            continue;
        }
        let v = stationarity(wp, wm, st.f[e]);
        let (nwp, nwm) = if a < b { (dd(floor), wm) } else { (wp, dd(floor)) };
        let t = solve_flow_for(nwp, nwm, v)?;
        let change = to_f64(t - st.f[e]);
        out.dw += to_f64((nwp - wp) + (nwm - wm));
        st.wplus[e] = nwp;
        st.wminus[e] = nwm;
        st.f[e] = t;
        let arc = &p.arcs[e];
        out.demand[arc.head] += change;
        out.demand[arc.tail] -= change;
        out.demand_l1 += 2.0 * change.abs();
        out.edges.push(e);
    }
    let bound = 96.0 * out.edges.len() as f64 * delta.powi(4) * wn * wn;
    if out.dw > bound * (1.0 + 1e-12) {
        return Err(AccelError::Bound(format!("balancing added {:e} > {bound:e}", out.dw)));
    }
    Ok(out)
}

/// Applies a regularized step: f += f~, then for arcs whose congestion
/// reaches 1 / (2 delta sqrt(2 ||w||)) moves weight across so that the
/// residual stays low-energy:
/// w+ += (s+'/s-') w- (rho-)^2 and w- += (s-'/s+') w+ (rho+)^2.
/// Returns the weight added.
pub fn perturbed_correction(st: &mut FlowState, step: &StepSolution, delta: f64) -> f64 {
    let cinf = congestion_threshold(delta, st.norm_w1());
    for e in 0..st.m() {
        st.f[e] += step.flow[e];
    }
    let mut added = dd(0.0);
    for e in 0..st.m() {
        let (rp, rm) = (step.rho_plus[e], step.rho_minus[e]);
        let (wp, wm) = (st.wplus[e], st.wminus[e]);
        if rm.abs() >= cinf {
            let inc = ddiv(st.splus(e), st.sminus(e)) * wm * (rm * rm);
            st.wplus[e] += inc;
            added += inc;
        }
        if rp.abs() >= cinf {
            let inc = ddiv(st.sminus(e), st.splus(e)) * wp * (rp * rp);
            st.wminus[e] += inc;
            added += inc;
        }
    }
    to_f64(added)
}

/// Restores exact centrality from a residual equal to dh (mod Im(B)).
pub fn absorb_residual_into_weights(st: &mut FlowState, dh: &[Dd]) -> f64 {
    absorb_into_weights(st, dh)
}

pub struct Accel<'a> {
    pub ipm: Ipm<'a>,
    pub star_net: StarNetwork,
    pub cfg: AccelConfig,
    pub diag: AccelDiagnostics,
    pub demand: PerturbedDemand,
}

impl<'a> Accel<'a> {
    pub fn new(p: &'a Problem, cfg: AccelConfig) -> Self {
        let demand = PerturbedDemand::new(p.demand.iter().map(|&d| d as f64).collect());
        let diag = AccelDiagnostics { min_delta: f64::INFINITY, delta_above_lower_bound: true, ..Default::default() };
        Accel { ipm: Ipm::new(p), star_net: StarNetwork::new(p), cfg, diag, demand }
    }

    fn p(&self) -> &'a Problem {
        self.ipm.p
    }

    fn params(&self, st: &FlowState, delta: f64) -> RegParams {
        choose_params(st.norm_w1(), self.p().m() as f64, delta, self.cfg.reg_scale)
    }

    /// Balancing, regularized step for h = delta (w+/s+ - w-/s-), perturbed
    /// correction, recentering against the shifted objective, and absorption
    /// of the shift into the weights.
    pub fn progress_step_1138(&mut self, st: &mut FlowState, delta: f64) -> Result<IterationRecord, AccelError> {
        let p = self.p();
        let mut rec = IterationRecord { delta, ..Default::default() };
        let bal = balance_weights(p, st, delta)?;
        let wn = st.norm_w1();
        let star = build_star_graph(p, &st.wplus_f64(), &st.wminus_f64());
        let params = self.params(st, delta);
        (rec.norm_w, rec.p, rec.kappa) = (wn, params.p, params.kappa);
        let h = predictor_residual(st, delta);
        let step = solve_regularized_step(p, st, &star, &self.star_net, &h, &params, self.cfg.step_tol)?;
        rec.dichotomy_violations = dichotomy_violations(st, &step, delta);
        let mu_next = ddiv(st.mu, 1.0 + dd(delta));
        rec.dw_congested = perturbed_correction(st, &step, delta);
        let g = gamma_bound(delta, wn);
        let cap = 192.0 * 2f64.sqrt() * g * (delta * delta * wn).powf(1.5);
        if rec.dw_congested > cap * (1.0 + 1e-9) {
            return Err(AccelError::Bound(format!(
                "congested reweighting added {:e} > {cap:e}",
                rec.dw_congested
            )));
        }
        st.mu = mu_next;
        self.finish_step(st, &step, bal, rec)
    }

    /// Balancing, then the barrier step solved to optimality, recentering,
    /// and absorption of the p-norm shift.
    pub fn progress_step_43(&mut self, st: &mut FlowState, delta: f64) -> Result<IterationRecord, AccelError> {
        let p = self.p();
        let mut rec = IterationRecord { delta, ..Default::default() };
        let bal = balance_weights(p, st, delta)?;
        let wn = st.norm_w1();
        let star = build_star_graph(p, &st.wplus_f64(), &st.wminus_f64());
        let params = self.params(st, delta);
        (rec.norm_w, rec.p, rec.kappa) = (wn, params.p, params.kappa);
        let step = solve_barrier_step(p, st, &star, &self.star_net, &params, self.cfg.step_tol)?;
        for e in 0..st.m() {
            st.f[e] += step.flow[e];
        }
        st.mu = ddiv(st.mu, 1.0 + dd(delta));
        let rec_out = self.finish_step(st, &step, bal, rec)?;
        let bound = params.p as f64 * 1e12 * delta.powi(4) * wn.powf(2.0 + 1.0 / params.p as f64) * wn.ln().powi(2);
        if rec_out.dw_absorb > bound {
            return Err(AccelError::Bound(format!("shift absorption added {:e} > {bound:e}", rec_out.dw_absorb)));
        }
        Ok(rec_out)
    }

    fn finish_step(
        &mut self,
        st: &mut FlowState,
        step: &StepSolution,
        bal: BalanceOutcome,
        mut rec: IterationRecord,
    ) -> Result<IterationRecord, AccelError> {
        rec.rho_inf = step.rho_inf();
        rec.solver_iterations = step.iterations;
        rec.dh_l1 = step.dh_l1();
        rec.step_demand_l1 = step.demand_l1();
        rec.dw_balance = bal.dw;
        rec.balanced_edges = bal.edges.len();
        let shift: Vec<Dd> = step.dh.iter().map(|&x| dd(x)).collect();
        let perfect_before = self.ipm.trace.perfect_dw + self.ipm.trace.snap_dw;
        let shift = self.ipm.correct_to_central(st, Some(shift))?.expect("shift passed in");
        rec.start_energy = self.ipm.trace.last_start_energy;
        rec.dw_perfect = self.ipm.trace.perfect_dw + self.ipm.trace.snap_dw - perfect_before;
        rec.dw_absorb = absorb_residual_into_weights(st, &shift);
        let shift_l1: f64 = shift.iter().map(|&x| to_f64(x).abs()).sum();
        if rec.dw_absorb > shift_l1 * (1.0 + 1e-12) {
            return Err(AccelError::Bound(format!("absorption added {:e} > ||dh||_1", rec.dw_absorb)));
        }
        self.demand.add(&bal.demand);
        self.demand.add(&step.demand);
        rec.demand_l1 = step.demand_l1() + bal.demand_l1;
        Ok(rec)
    }

    /// One progress step of the configured method, retried once at delta / 2
    /// if rejected. Returns the delta used.
    pub fn step(&mut self, st: &mut FlowState, delta: f64) -> Result<f64, AccelError> {
        let saved = (st.clone(), self.demand.clone());
        let mut delta = delta;
        let mut first_error = None;
        for attempt in 0..2 {
            let result = match self.cfg.method {
                Method::Eleven8 => self.progress_step_1138(st, delta),
                Method::Four3 => self.progress_step_43(st, delta),
            };
            match result {
                Ok(rec) => {
                    let before = &saved.0;
                    for e in 0..st.m() {
                        let d = (st.wplus[e] - before.wplus[e]).min(st.wminus[e] - before.wminus[e]);
                        self.diag.min_weight_change = self.diag.min_weight_change.min(to_f64(d));
                    }
                    if rec.balanced_edges > 0 {
                        self.diag.balancing_events += 1;
                    }
                    self.diag.records.push(rec);
                    return Ok(delta);
                }
                Err(err @ (AccelError::Budget { .. } | AccelError::Ledger(_))) => return Err(err),
                Err(err) => {
                    log::debug!("step at delta {delta:e} rejected: {err}");
                    *st = saved.0.clone();
                    self.demand = saved.1.clone();
                    if attempt == 0 {
                        first_error = Some(err.to_string());
                        self.diag.retries += 1;
                        delta /= 2.0;
                    } else {
                        return Err(AccelError::Rejected {
                            delta: delta * 2.0,
                            reason: format!("{}; then {err}", first_error.unwrap_or_default()),
                        });
                    }
                }
            }
        }
        unreachable!()
    }

    /// Progress steps until mu ||w||_1 <= eps, checking the weight budget,
    /// the demand ledger, the balancing budget and centrality after each.
    pub fn solve(&mut self, st: &mut FlowState, eps: f64) -> Result<(), AccelError> {
        let m = st.m();
        let limit = 3.0 * m as f64;
        while st.gap() > eps {
            if self.ipm.trace.iterations >= self.cfg.max_iters {
                return Err(AccelError::IterationLimit(self.cfg.max_iters));
            }
            let wn = st.norm_w1();
            let delta = schedule_delta(self.cfg.method, m, wn, self.cfg.delta_scale);
            self.diag.min_delta = self.diag.min_delta.min(delta);
            if delta <= wn.powf(-0.5) {
                self.diag.delta_above_lower_bound = false;
            }
            self.step(st, delta)?;
            self.ipm.trace.iterations += 1;
            let wn = st.norm_w1();
            self.diag.max_norm_w = self.diag.max_norm_w.max(wn);
            if wn > limit {
                return Err(AccelError::Budget { norm: wn, limit });
            }
            if self.diag.balancing_events as f64 > 3.0 / (2.0 * self.diag.min_delta) {
                return Err(AccelError::Bound(format!(
                    "{} balancing events exceed 3/(2 delta)",
                    self.diag.balancing_events
                )));
            }
            let gap = self.demand.mismatch(self.p(), st);
            self.diag.max_ledger_mismatch = self.diag.max_ledger_mismatch.max(gap);
            if gap > 1e-8 {
                return Err(AccelError::Ledger(gap));
            }
            self.ipm.checkpoint(st)?;
        }
        Ok(())
    }
}

/// Arcs with max(|rho+|, |rho-|) >= C_inf whose barrier gradient change
/// |w+ rho+ / s+| + |w- rho- / s-| exceeds 6 gamma.
fn dichotomy_violations(st: &FlowState, step: &StepSolution, delta: f64) -> usize {
    let wn = st.norm_w1();
    let cinf = congestion_threshold(delta, wn);
    let g6 = 6.0 * gamma_bound(delta, wn);
    let (wp, wm) = (st.wplus_f64(), st.wminus_f64());
    let (sp, sm) = (st.splus_f64(), st.sminus_f64());
    (0..st.m())
        .filter(|&e| {
            let (rp, rm) = (step.rho_plus[e], step.rho_minus[e]);
            rp.abs().max(rm.abs()) >= cinf && (wp[e] * rp / sp[e]).abs() + (wm[e] * rm / sm[e]).abs() > g6
        })
        .count()
}
