//! End-to-end driver: augmentation, interior point method, repair, and bit
//! scaling of large costs.

use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::accel::{self, Accel, AccelConfig, AccelDiagnostics, AccelError, PerturbedDemand};
use crate::graph::{augment_for_init, AugmentedProblem, Problem};
use crate::ipm::{Ipm, IpmError, Trace};
use crate::oracle::{self, Status};
use crate::repair::{self, RepairError};
use crate::state::FlowState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Eleven8,
    Four3,
    Oracle,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "eleven8" => Ok(Method::Eleven8),
            "four3" => Ok(Method::Four3),
            "oracle" => Ok(Method::Oracle),
            _ => Err(format!("unknown method {s:?} (vanilla, eleven8, four3, oracle)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Vanilla => "vanilla",
            Method::Eleven8 => "eleven8",
            Method::Four3 => "four3",
            Method::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveConfig {
    pub method: Method,
    /// Target mu ||w||_1 before repair; m^-3 of the augmented instance if None.
    pub epsilon: Option<f64>,
    pub delta_scale: f64,
    pub reg_scale: f64,
    pub max_iters: usize,
    /// Bit scaling engages when ||c||_inf exceeds this; m^3 if None.
    pub scaling_threshold: Option<i64>,
}

impl SolveConfig {
    pub fn new(method: Method) -> Self {
        SolveConfig {
            method,
            epsilon: None,
            delta_scale: 1.0,
            reg_scale: 100.0,
            max_iters: 1_000_000,
            scaling_threshold: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("initialization: {0}")]
    Init(IpmError),
    #[error("interior point: {0}")]
    Ipm(IpmError),
    #[error("accelerated interior point: {0}")]
    Accel(AccelError),
    #[error("repair: {0}")]
    Repair(#[from] RepairError),
    #[error("cost scaling: {0}")]
    Scaling(String),
}

/// State and measurements after the interior point phase.
pub struct IpmOutcome {
    pub state: FlowState,
    pub trace: Trace,
    pub accel: Option<AccelDiagnostics>,
    pub demand: Option<PerturbedDemand>,
    pub epsilon: f64,
}

impl IpmOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.iterations
    }

    /// ||d_cur - d||_1 of the flow handed to repair.
    pub fn demand_perturbation(&self) -> f64 {
        self.demand.as_ref().map_or(0.0, |d| d.l1())
    }
}

pub fn default_epsilon(aug: &AugmentedProblem) -> f64 {
    (aug.problem.m().max(2) as f64).powi(-3)
}

/// Runs initialization and the chosen interior point method on the augmented
/// instance. `method` must not be `Oracle`.
pub fn run_ipm(aug: &AugmentedProblem, cfg: &SolveConfig) -> Result<IpmOutcome, SolveError> {
    let p = &aug.problem;
    let eps = cfg.epsilon.unwrap_or_else(|| default_epsilon(aug));
    match cfg.method {
        Method::Vanilla => {
            let mut ipm = Ipm::new(p);
            let mut st = ipm.initialize().map_err(SolveError::Init)?;
            ipm.checkpoint(&st).map_err(SolveError::Init)?;
            ipm.vanilla_solve(&mut st, eps, cfg.max_iters).map_err(SolveError::Ipm)?;
            Ok(IpmOutcome { state: st, trace: ipm.trace, accel: None, demand: None, epsilon: eps })
        }
        Method::Eleven8 | Method::Four3 => {
            let method = if cfg.method == Method::Eleven8 { accel::Method::Eleven8 } else { accel::Method::Four3 };
            let acfg = AccelConfig {
                delta_scale: cfg.delta_scale,
                reg_scale: cfg.reg_scale,
                max_iters: cfg.max_iters,
                ..AccelConfig::new(method)
            };
            let mut acc = Accel::new(p, acfg);
            let mut st = acc.ipm.initialize().map_err(SolveError::Init)?;
            acc.ipm.checkpoint(&st).map_err(SolveError::Init)?;
            acc.solve(&mut st, eps).map_err(SolveError::Accel)?;
            Ok(IpmOutcome {
                state: st,
                trace: acc.ipm.trace,
                accel: Some(acc.diag),
                demand: Some(acc.demand),
                epsilon: eps,
            })
        }
        Method::Oracle => unreachable!("the oracle has no interior point phase"),
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub ipm_ms: f64,
    pub repair_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub n: usize,
    pub m: usize,
    pub max_cost: i64,
    pub method: Method,
    pub status: Status,
    pub cost: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<Vec<u8>>,
    pub iterations: usize,
    pub final_gap: f64,
    pub demand_perturbation: f64,
    pub repair_phases: usize,
    pub scaling_stages: usize,
    pub oracle_cost: Option<i64>,
    pub violations: Vec<String>,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct Single {
    status: Status,
    flow: Vec<u8>,
    iterations: usize,
    final_gap: f64,
    demand_perturbation: f64,
    repair_phases: usize,
    ipm_ms: f64,
    repair_ms: f64,
}

/// One unscaled solve of `p`.
fn solve_single(p: &Problem, cfg: &SolveConfig) -> Result<Single, SolveError> {
    if cfg.method == Method::Oracle {
        let t = Instant::now();
        let sol = oracle::ssp_solve(p);
        return Ok(Single {
            status: sol.status,
            flow: sol.flow,
            iterations: 0,
            final_gap: 0.0,
            demand_perturbation: 0.0,
            repair_phases: 0,
            ipm_ms: ms(t),
            repair_ms: 0.0,
        });
    }
    let aug = augment_for_init(p);
    if aug.problem.m() == 0 {
        // Nothing to route: Problem validation guarantees a zero demand.
        return Ok(Single {
            status: Status::Optimal,
            flow: Vec::new(),
            iterations: 0,
            final_gap: 0.0,
            demand_perturbation: 0.0,
            repair_phases: 0,
            ipm_ms: 0.0,
            repair_ms: 0.0,
        });
    }
    let t = Instant::now();
    let out = run_ipm(&aug, cfg)?;
    let ipm_ms = ms(t);
    let t = Instant::now();
    let rep = repair::repair(&aug, &out.state)?;
    let repair_ms = ms(t);
    let (status, flow) = match rep.flow {
        Some(f) => (Status::Optimal, f),
        None => (Status::Infeasible, Vec::new()),
    };
    Ok(Single {
        status,
        flow,
        iterations: out.iterations(),
        final_gap: out.state.gap(),
        demand_perturbation: out.demand_perturbation(),
        repair_phases: rep.phases,
        ipm_ms,
        repair_ms,
    })
}

/// Potentials pi with c(u,v) + pi(u) - pi(v) >= 0 on every residual arc of an
/// optimal flow: shortest distances from a virtual source in the residual
/// graph.
pub fn optimal_potentials(p: &Problem, flow: &[u8]) -> Result<Vec<i64>, SolveError> {
    let mut dist = vec![0i64; p.n];
    for round in 0..=p.n {
        let mut changed = false;
        for (e, a) in p.arcs.iter().enumerate() {
            let (u, v, c) = if flow[e] == 0 { (a.tail, a.head, a.cost) } else { (a.head, a.tail, -a.cost) };
            if dist[u] + c < dist[v] {
                dist[v] = dist[u] + c;
                changed = true;
            }
        }
        if !changed {
            return Ok(dist);
        }
        if round == p.n {
            break;
        }
    }
    Err(SolveError::Scaling("stage flow is not optimal (negative residual cycle)".into()))
}

/// Solves `p` with the configured method, bit-scaling the costs when they
/// exceed the threshold. Each stage solves the instance with costs
/// 2 c_(k) + bit reduced by twice the previous stage's potentials, clamped to
/// +-2(m+1); arcs beyond that clamp cannot change state between consecutive
/// stages, so the optimal flows coincide.
pub fn solve(p: &Problem, cfg: &SolveConfig) -> Result<RunReport, SolveError> {
    let start = Instant::now();
    let m = p.m();
    let w = p.cost_inf_norm();
    let threshold = cfg.scaling_threshold.unwrap_or_else(|| (m.max(2) as i64).pow(3));
    let mut shift = 0u32;
    while (w >> shift) > threshold {
        shift += 1;
    }
    let mut report = RunReport {
        n: p.n,
        m,
        max_cost: w,
        method: cfg.method,
        status: Status::Optimal,
        cost: None,
        flow: None,
        iterations: 0,
        final_gap: 0.0,
        demand_perturbation: 0.0,
        repair_phases: 0,
        scaling_stages: 0,
        oracle_cost: None,
        violations: Vec::new(),
        timings: Timings::default(),
    };
    let mut pi = vec![0i64; p.n];
    let mut flow: Vec<u8> = Vec::new();
    let clamp = 2 * (m as i64 + 1);
    for k in (0..=shift).rev() {
        let mut stage = p.clone();
        for (e, a) in stage.arcs.iter_mut().enumerate() {
            let c = p.arcs[e].cost >> k;
            a.cost = if k == shift { c } else { (c + 2 * pi[a.tail] - 2 * pi[a.head]).clamp(-clamp, clamp) };
        }
        let single = solve_single(&stage, cfg)?;
        report.scaling_stages += 1;
        report.iterations += single.iterations;
        report.final_gap = single.final_gap;
        report.demand_perturbation = report.demand_perturbation.max(single.demand_perturbation);
        report.repair_phases += single.repair_phases;
        report.timings.ipm_ms += single.ipm_ms;
        report.timings.repair_ms += single.repair_ms;
        if single.status == Status::Infeasible {
            report.status = Status::Infeasible;
            report.timings.total_ms = ms(start);
            return Ok(report);
        }
        flow = single.flow;
        if k > 0 {
            let stage_pi = optimal_potentials(&stage, &flow)?;
            pi = if k == shift {
                stage_pi
            } else {
                pi.iter().zip(&stage_pi).map(|(a, b)| 2 * a + b).collect()
            };
        }
    }
    report.cost = Some(p.cost_of(&flow));
    if p.divergence_int(&flow) != p.demand {
        report.violations.push("returned flow does not route the demand".into());
    }
    report.flow = Some(flow);
    report.timings.total_ms = ms(start);
    Ok(report)
}

/// `solve` followed by a comparison against the exact oracle.
pub fn solve_verified(p: &Problem, cfg: &SolveConfig) -> Result<RunReport, SolveError> {
    let mut report = solve(p, cfg)?;
    let exact = oracle::ssp_solve(p);
    if exact.status != report.status {
        report.violations.push(format!("status {:?} but oracle says {:?}", report.status, exact.status));
    }
    if exact.status == Status::Optimal {
        report.oracle_cost = Some(exact.cost);
        if report.cost != Some(exact.cost) {
            report.violations.push(format!("cost {:?} but oracle optimum {}", report.cost, exact.cost));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Arc;

    fn triangle() -> Problem {
        let arcs = vec![
            Arc { tail: 0, head: 1, cost: 1 },
            Arc { tail: 1, head: 2, cost: 1 },
            Arc { tail: 0, head: 2, cost: 3 },
        ];
        Problem::new(3, arcs, vec![-1, 0, 1]).unwrap()
    }

    #[test]
    fn every_method_solves_the_triangle() {
        for method in [Method::Oracle, Method::Vanilla, Method::Eleven8, Method::Four3] {
            let r = solve_verified(&triangle(), &SolveConfig::new(method)).unwrap();
            assert_eq!(r.cost, Some(2), "{method}");
            assert!(r.violations.is_empty(), "{method}: {:?}", r.violations);
        }
    }

    #[test]
    fn empty_instance() {
        let p = Problem::new(1, vec![], vec![0]).unwrap();
        let r = solve(&p, &SolveConfig::new(Method::Vanilla)).unwrap();
        assert_eq!(r.cost, Some(0));
    }

    #[test]
    fn scaled_and_unscaled_agree() {
        let mut p = triangle();
        p.arcs[0].cost = 1000;
        p.arcs[1].cost = 999;
        p.arcs[2].cost = 2001;
        let mut cfg = SolveConfig::new(Method::Vanilla);
        let direct = solve(&p, &cfg).unwrap();
        cfg.scaling_threshold = Some(4);
        let scaled = solve(&p, &cfg).unwrap();
        assert!(scaled.scaling_stages > 1);
        assert_eq!(direct.cost, Some(1999));
        assert_eq!(scaled.cost, direct.cost);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Vanilla, Method::Eleven8, Method::Four3, Method::Oracle] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("fast".parse::<Method>().is_err());
    }
}
