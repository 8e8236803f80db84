//! Central path machinery and the short-step interior point method.
//!
//! A state is central at mu when w+/s+ - w-/s- + c/mu lies in Im(B). The
//! potentials psi track the Im(B) part (scaled by mu), so the residual
//! `FlowState::residual_at` is what has to be driven to zero.

use serde::Serialize;

use crate::electrical::{correction_flow, CorrectionFlow, ElectricalError, Network};
use crate::graph::Problem;
use crate::state::{dd, ddiv, to_f64, Dd, FlowState};

#[derive(Debug, thiserror::Error)]
pub enum IpmError {
    #[error(transparent)]
    Electrical(#[from] ElectricalError),
    #[error("precondition violated: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("step infeasible: {0}")]
    StepInfeasible(String),
    #[error("weight budget exceeded: {0}")]
    Budget(String),
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
}

/// Below this energy a correction step that fails to halve the energy is
/// taken to have hit the precision floor rather than diverged.
pub const ENERGY_FLOOR: f64 = 1e-14;

/// Relative tolerance of the centrality check.
pub const CENTRALITY_TOL: f64 = 1e-8;

/// Primal objective, dual objective and the expected gap mu ||w||_1.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapCheck {
    pub primal: f64,
    pub dual: f64,
    pub expected: f64,
    /// |(primal - dual) - expected| over max(|primal|, |dual|, expected).
    pub objective_rel_err: f64,
    /// |(primal - dual) - expected| over expected.
    pub gap_rel_err: f64,
}

/// Measurements collected while solving.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Trace {
    /// (E, E') for consecutive correction steps.
    pub contraction: Vec<(f64, f64)>,
    /// (delta, energy) of every accepted predictor step.
    pub predictor: Vec<(f64, f64)>,
    pub gaps: Vec<GapCheck>,
    /// Relative centrality error after each recentering.
    pub centrality: Vec<f64>,
    pub mu: Vec<f64>,
    pub norm_w: Vec<f64>,
    pub iterations: usize,
    pub delta_halvings: usize,
    /// Weight added by perfect corrections and by the final snap.
    pub perfect_dw: f64,
    pub snap_dw: f64,
    /// Smallest componentwise weight change seen; negative means a decrease.
    pub min_weight_change: f64,
    /// Energy at the start of the latest recentering.
    pub last_start_energy: f64,
}

pub struct Ipm<'a> {
    pub p: &'a Problem,
    pub net: Network,
    pub trace: Trace,
}

/// h = delta (w+/s+ - w-/s-): the residual left by dividing mu by 1 + delta
/// at an exactly central state.
pub fn predictor_residual(st: &FlowState, delta: f64) -> Vec<f64> {
    st.barrier_terms().iter().map(|&b| delta * to_f64(b)).collect()
}

/// Adds the correction to the weights so that the barrier terms drop by dh:
/// w+ -= s+ min(dh, 0), w- += s- max(dh, 0). Returns ||dw||_1.
pub fn absorb_into_weights(st: &mut FlowState, dh: &[Dd]) -> f64 {
    let mut total = dd(0.0);
    for e in 0..st.m() {
        let x = dh[e];
        if x < dd(0.0) {
            let inc = -(st.splus(e) * x);
            st.wplus[e] += inc;
            total += inc;
        } else if x > dd(0.0) {
            let inc = st.sminus(e) * x;
            st.wminus[e] += inc;
            total += inc;
        }
    }
    to_f64(total)
}

fn neg_f64(v: &[Dd]) -> Vec<f64> {
    v.iter().map(|&x| -to_f64(x)).collect()
}

fn apply_flow(st: &mut FlowState, cf: &CorrectionFlow, mu: Dd) {
    for e in 0..st.m() {
        st.f[e] += cf.flow[e];
    }
    for (v, &phi) in cf.phi.iter().enumerate() {
        st.psi[v] += mu * phi;
    }
}

impl<'a> Ipm<'a> {
    pub fn new(p: &'a Problem) -> Self {
        let trace = Trace { min_weight_change: 0.0, ..Trace::default() };
        Ipm { p, net: Network::from_problem(p), trace }
    }

    fn check_slacks(&self, st: &FlowState) -> Result<(), IpmError> {
        let s = st.min_slack();
        if !(s >= 1e-28) {
            return Err(IpmError::Numerical(format!("slack {s:e} too small")));
        }
        Ok(())
    }

    /// f = 1/2, w = 1, mu = ||c||_2, then recentered.
    pub fn initialize(&mut self) -> Result<FlowState, IpmError> {
        let c2 = self.p.cost_two_norm();
        let mu = if c2 > 0.0 { c2 } else { 1.0 };
        let mut st = FlowState::halves(self.p.n, self.p.m(), mu);
        self.correct_to_central(&mut st, None)?;
        Ok(st)
    }

    /// Residual correction steps until the energy reaches the precision
    /// floor, then a perfect correction and a final snap onto the central
    /// path. Returns the shift rescaled by the mu change of the perfect
    /// correction.
    pub fn correct_to_central(
        &mut self,
        st: &mut FlowState,
        shift: Option<Vec<Dd>>,
    ) -> Result<Option<Vec<Dd>>, IpmError> {
        let wn = st.norm_w1();
        let target = 1e-20f64.min(wn.powi(-22) / 16.0);
        let cap = (1.0 / target).log2().log2().ceil() as usize + 3;
        let mut prev: Option<f64> = None;
        let mut stalls = 0;
        let mut steps = 0;
        let cf = loop {
            let res = st.residual_at(self.p, st.mu, shift.as_deref());
            let cf = correction_flow(&self.net, st, &neg_f64(&res))?;
            let e = cf.energy;
            if !e.is_finite() {
                return Err(IpmError::Numerical("non-finite energy".into()));
            }
            if steps == 0 {
                self.trace.last_start_energy = e;
            }
            if steps == 0 && e > 0.25 + 1e-9 {
                return Err(IpmError::Contract(format!("correction started at energy {e:e}")));
            }
            if let Some(ep) = prev {
                self.trace.contraction.push((ep, e));
                if e >= ep / 2.0 {
                    if e <= ENERGY_FLOOR {
                        break cf;
                    }
                    stalls += 1;
                    if stalls >= 2 {
                        return Err(IpmError::Numerical(format!(
                            "energy contraction stalled at {e:e}"
                        )));
                    }
                }
            }
            if e <= target {
                break cf;
            }
            if steps >= cap {
                if e <= ENERGY_FLOOR {
                    break cf;
                }
                return Err(IpmError::Numerical(format!(
                    "energy {e:e} after {steps} correction steps"
                )));
            }
            if cf.rho_inf() >= 1.0 {
                return Err(IpmError::StepInfeasible(format!(
                    "correction congestion {}",
                    cf.rho_inf()
                )));
            }
            let mu = st.mu;
            apply_flow(st, &cf, mu);
            self.check_slacks(st)?;
            prev = Some(e);
            steps += 1;
        };
        let shift = self.perfect_correction(st, &cf, shift)?;
        self.snap(st, shift.as_deref())?;
        Ok(shift)
    }

    /// Absorbs the congestion of a low-energy correction into the weights:
    /// w' = w (1 + rho) / (1 - k), mu' = mu (1 - k) with k = ||rho||_inf.
    /// Both barrier and cost terms of the residual then scale by 1 / (1 - k).
    pub fn perfect_correction(
        &mut self,
        st: &mut FlowState,
        cf: &CorrectionFlow,
        shift: Option<Vec<Dd>>,
    ) -> Result<Option<Vec<Dd>>, IpmError> {
        let eps = cf.energy;
        if eps > 0.01 {
            return Err(IpmError::Contract(format!("perfect correction at energy {eps:e}")));
        }
        let k = cf.rho_inf();
        let scale = ddiv(dd(1.0), 1.0 - dd(k));
        let w_before = st.norm_w1();
        let mu_before = st.mu_f64();
        let mut min_change = f64::INFINITY;
        for e in 0..st.m() {
            // (1 + rho) / (1 - k) >= 1 exactly; clamp away the rounding.
            let grow = |rho: f64| {
                let g = (1.0 + dd(rho)) * scale;
                if g < dd(1.0) { dd(1.0) } else { g }
            };
            let wp = st.wplus[e] * grow(cf.rho_plus[e]);
            let wm = st.wminus[e] * grow(cf.rho_minus[e]);
            min_change = min_change.min(to_f64(wp - st.wplus[e])).min(to_f64(wm - st.wminus[e]));
            st.wplus[e] = wp;
            st.wminus[e] = wm;
        }
        for (v, &phi) in cf.phi.iter().enumerate() {
            st.psi[v] += st.mu * phi;
        }
        st.mu *= 1.0 - dd(k);
        let dw = st.norm_w1() - w_before;
        self.trace.perfect_dw += dw;
        self.trace.min_weight_change = self.trace.min_weight_change.min(min_change);
        let slack = 1e-12 * w_before;
        if dw > 4.0 * eps.sqrt() * w_before + slack {
            return Err(IpmError::Numerical(format!("perfect correction added {dw:e} weight")));
        }
        if st.mu_f64() > mu_before * (1.0 + 2.0 * eps.sqrt()) * (1.0 + 1e-15) {
            return Err(IpmError::Numerical("perfect correction raised mu too far".into()));
        }
        Ok(shift.map(|s| s.into_iter().map(|x| x * scale).collect()))
    }

    /// Removes the last rounding-level residual: its component orthogonal to
    /// Im(B) in the local norm goes into the weights, the rest into psi.
    fn snap(&mut self, st: &mut FlowState, shift: Option<&[Dd]>) -> Result<(), IpmError> {
        let res = st.residual_at(self.p, st.mu, shift);
        // Split in the local norm, so edges with large slack keep their
        // residual in psi instead of charging it to the weights.
        let cond: Vec<f64> = st.resistances().iter().map(|r| 1.0 / r).collect();
        let (_, phi) = self.net.weighted_projection(&cond, &neg_f64(&res))?;
        let perp: Vec<Dd> = self
            .p
            .arcs
            .iter()
            .enumerate()
            .map(|(e, a)| res[e] - (dd(phi[a.head]) - dd(phi[a.tail])))
            .collect();
        self.trace.snap_dw += absorb_into_weights(st, &perp);
        for (v, &x) in phi.iter().enumerate() {
            st.psi[v] += st.mu * x;
        }
        Ok(())
    }

    /// ||g - B phi||_inf / ||g||_inf for the least-squares phi, where g is the
    /// full barrier gradient.
    pub fn centrality_error(&self, st: &FlowState) -> Result<f64, IpmError> {
        // g and the residual differ by B psi / mu, which is in Im(B), so the
        // residual has the same orthogonal component and far less cancellation.
        let res: Vec<f64> = st.residual_at(self.p, st.mu, None).iter().map(|&x| to_f64(x)).collect();
        let g = st.gradient(self.p);
        let gnorm = g.iter().fold(0.0f64, |a, &x| a.max(to_f64(x).abs()));
        let (_, perp) = self.net.least_squares(&res)?;
        let pnorm = perp.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        Ok(if gnorm > 0.0 { pnorm / gnorm } else { pnorm })
    }

    /// Compares c^T f - (psi^T B^T f - sum mu w+/s+) against mu ||w||_1.
    pub fn gap_check(&self, st: &FlowState) -> GapCheck {
        let mut primal = dd(0.0);
        for (e, a) in self.p.arcs.iter().enumerate() {
            primal += st.f[e] * (a.cost as f64);
        }
        let div = st.divergence(self.p);
        let mut dual = dd(0.0);
        for v in 0..self.p.n {
            dual += st.psi[v] * div[v];
        }
        for e in 0..st.m() {
            dual -= ddiv(st.mu * st.wplus[e], st.splus(e));
        }
        let expected = st.mu * st.norm_w1_dd();
        let diff = to_f64(primal - dual - expected).abs();
        let (p64, d64, x64) = (to_f64(primal), to_f64(dual), to_f64(expected));
        let denom = p64.abs().max(d64.abs()).max(x64);
        GapCheck {
            primal: p64,
            dual: d64,
            expected: x64,
            objective_rel_err: if denom > 0.0 { diff / denom } else { diff },
            gap_rel_err: if x64 > 0.0 { diff / x64 } else { diff },
        }
    }

    /// Records the gap and centrality at an exactly central checkpoint.
    pub fn checkpoint(&mut self, st: &FlowState) -> Result<(), IpmError> {
        let g = self.gap_check(st);
        self.trace.gaps.push(g);
        let c = self.centrality_error(st)?;
        self.trace.centrality.push(c);
        self.trace.mu.push(st.mu_f64());
        self.trace.norm_w.push(st.norm_w1());
        Ok(())
    }

    /// Predictor step to mu / (1 + delta). Halves delta until the congestion
    /// is at most 1/2. Returns the delta used.
    pub fn predictor(&mut self, st: &mut FlowState, delta: f64) -> Result<f64, IpmError> {
        let mut delta = delta;
        for _ in 0..40 {
            let mu_next = ddiv(st.mu, 1.0 + dd(delta));
            let res = st.residual_at(self.p, mu_next, None);
            let cf = correction_flow(&self.net, st, &neg_f64(&res))?;
            if cf.rho_inf() <= 0.5 {
                self.trace.predictor.push((delta, cf.energy));
                apply_flow(st, &cf, mu_next);
                st.mu = mu_next;
                self.check_slacks(st)?;
                return Ok(delta);
            }
            delta /= 2.0;
            self.trace.delta_halvings += 1;
        }
        Err(IpmError::StepInfeasible("predictor congestion stays above 1/2".into()))
    }

    /// Short-step method with delta = 1/sqrt(2 ||w||_1) until mu ||w||_1 <= eps.
    pub fn vanilla_solve(
        &mut self,
        st: &mut FlowState,
        eps: f64,
        max_iters: usize,
    ) -> Result<(), IpmError> {
        let m = st.m();
        while st.gap() > eps {
            if self.trace.iterations >= max_iters {
                return Err(IpmError::IterationLimit(max_iters));
            }
            let delta = 1.0 / (2.0 * st.norm_w1()).sqrt();
            self.predictor(st, delta)?;
            self.correct_to_central(st, None)?;
            self.trace.iterations += 1;
            let wn = st.norm_w1();
            if wn > 3.0 * m as f64 {
                return Err(IpmError::Budget(format!("||w||_1 = {wn} exceeds 3m = {}", 3 * m)));
            }
            self.checkpoint(st)?;
        }
        Ok(())
    }
}
