//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any gated criterion (1 to 10) fails. Criterion 11 is reported only.

mod common;

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unitflow::bench::{run_bench, summarize, BenchConfig};
use unitflow::electrical::Network;
use unitflow::gen;
use unitflow::graph::{augment_for_init, Problem};
use unitflow::ipm::Ipm;
use unitflow::mixed::{solve_quad_plus_p, BarrierPair, SeparableObjective};
use unitflow::oracle::{brute_force_solve, ssp_solve, Status};
use unitflow::repair::repair;
use unitflow::solve::{run_ipm, Method, SolveConfig};

use common::{circulation_projector, derivative_error, incidence, kkt_electrical};

const FEASIBLE: usize = 200;
const ARBITRARY: usize = 40;

fn instances() -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..FEASIBLE + ARBITRARY)
        .map(|i| {
            let (n, m) = gen::random_size(&mut rng, 30, 120);
            if i < FEASIBLE {
                gen::random_feasible(&mut rng, n, m, 20)
            } else {
                gen::random_demand(&mut rng, n, m, 20)
            }
        })
        .collect()
}

#[derive(Default)]
struct Run {
    error: Option<String>,
    exact: bool,
    infeasible: bool,
    m_aug: usize,
    max_gap_err: f64,
    max_objective_err: f64,
    checkpoints: usize,
    contraction: Vec<(f64, f64)>,
    predictor: Vec<f64>,
    halvings: usize,
    /// Per-step violations of the accel step guarantees, as messages.
    step_faults: Vec<String>,
    steps: usize,
    max_norm_ratio: f64,
    min_weight_change: f64,
    ledger: f64,
    demand_l1: f64,
    demand_budget: f64,
    iterations: usize,
    /// iterations * delta / ln(m mu0 / eps)
    k_factor: Option<f64>,
}

fn run_one(p: &Problem, method: Method) -> Run {
    let mut r = Run::default();
    let exact = ssp_solve(p);
    r.infeasible = exact.status == Status::Infeasible;
    let aug = augment_for_init(p);
    r.m_aug = aug.problem.m();
    let out = match run_ipm(&aug, &SolveConfig::new(method)) {
        Ok(out) => out,
        Err(e) => {
            r.error = Some(e.to_string());
            return r;
        }
    };
    r.iterations = out.iterations();
    let t = &out.trace;
    r.checkpoints = t.gaps.len();
    r.max_gap_err = t.gaps.iter().map(|g| g.gap_rel_err).fold(0.0, f64::max);
    r.max_objective_err = t.gaps.iter().map(|g| g.objective_rel_err).fold(0.0, f64::max);
    r.contraction = t.contraction.clone();
    r.predictor = t.predictor.iter().map(|&(_, e)| e).collect();
    r.halvings = t.delta_halvings;
    r.min_weight_change = t.min_weight_change;
    let m = r.m_aug as f64;
    r.max_norm_ratio = t.norm_w.iter().fold(0.0f64, |a, &w| a.max(w)) / (3.0 * m);
    if let Some(d) = &out.accel {
        r.steps = d.records.len();
        r.min_weight_change = r.min_weight_change.min(d.min_weight_change);
        r.ledger = d.max_ledger_mismatch;
        r.demand_l1 = out.demand_perturbation();
        r.demand_budget = r.iterations as f64 + 3.0 / (2.0 * d.min_delta);
        let mu0 = t.mu.first().copied().unwrap_or(1.0);
        let logs = (m * mu0 / out.epsilon).ln();
        r.k_factor = Some(r.iterations as f64 * d.min_delta / logs);
        for (i, rec) in d.records.iter().enumerate() {
            let fault = match method {
                Method::Eleven8 => {
                    let (wn, p) = (rec.norm_w, rec.p as f64);
                    let base = rec.kappa * rec.delta * rec.delta * wn * wn.ln();
                    let dh_bound = p * wn.powf(1.0 / p) * base * base;
                    if rec.rho_inf > 0.5 {
                        Some(format!("rho {}", rec.rho_inf))
                    } else if rec.step_demand_l1 > 1.0 + 1e-9 {
                        Some(format!("demand {}", rec.step_demand_l1))
                    } else if rec.dh_l1 > dh_bound * (1.0 + 1e-6) {
                        Some(format!("dh {} > {dh_bound}", rec.dh_l1))
                    } else {
                        None
                    }
                }
                _ => {
                    if rec.rho_inf > 0.1 {
                        Some(format!("congestion {}", rec.rho_inf))
                    } else if rec.step_demand_l1 > 1.5 + 1e-9 {
                        Some(format!("demand {}", rec.step_demand_l1))
                    } else {
                        None
                    }
                }
            };
            if let Some(f) = fault {
                r.step_faults.push(format!("step {i}: {f}"));
            }
        }
    }
    match repair(&aug, &out.state) {
        Ok(fixed) => {
            r.exact = match exact.status {
                Status::Optimal => fixed.cost == Some(exact.cost),
                Status::Infeasible => fixed.cost.is_none(),
            };
        }
        Err(e) => r.error = Some(format!("repair: {e}")),
    }
    r
}

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} ({name}): {detail}");
        if !pass {
            self.failed.push(id);
        }
    }
}

fn worst<'a>(runs: impl Iterator<Item = &'a Run>, f: impl Fn(&Run) -> f64) -> f64 {
    runs.map(f).fold(0.0, f64::max)
}

fn criterion_10() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut qp_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(3..9);
        let m = rng.gen_range(n..3 * n);
        let arcs = gen::random_arcs(&mut rng, n, m, 5);
        let tail: Vec<usize> = arcs.iter().map(|a| a.tail).collect();
        let head: Vec<usize> = arcs.iter().map(|a| a.head).collect();
        let net = Network::new(n, tail.clone(), head.clone());
        let g: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..50.0)).collect();
        let sol = solve_quad_plus_p(&net, &g, &q, &vec![0.0; m], 4, 1e-12);
        let want = kkt_electrical(&tail, &head, n, &q, &g);
        match sol {
            Ok(s) => {
                for e in 0..m {
                    qp_err = qp_err.max((s.x[e] - want[e]).abs());
                }
            }
            Err(_) => qp_err = f64::INFINITY,
        }
        // The dense oracle itself must be a circulation.
        let b = incidence(&tail, &head, n);
        let proj = circulation_projector(&b);
        let w = DVector::from_vec(want.clone());
        debug_assert!((&proj * &w - &w).amax() < 1e-9);
    }
    let net = Network::new(2, vec![0, 1], vec![1, 0]);
    let mut newton_err = 0.0f64;
    for &(g, q, lam, p) in &[(1.0, 1.0, 1.0, 4u32), (0.5, 2.0, 3.0, 4), (2.0, 0.1, 1.0, 6), (-1.0, 1.0, 0.5, 6)] {
        let s = solve_quad_plus_p(&net, &[g, g], &[q, q], &[lam, lam], p, 1e-12).unwrap();
        // Circulations are (t, t): minimize -2 g t + q t^2 + 2 lam t^p / p.
        let mut t = 0.0f64;
        for _ in 0..200 {
            let d1 = -2.0 * g + 2.0 * q * t + 2.0 * lam * t.powi(p as i32 - 1);
            let d2 = 2.0 * q + 2.0 * lam * (p - 1) as f64 * t.powi(p as i32 - 2);
            t -= d1 / d2;
        }
        newton_err = newton_err.max((s.x[0] - t).abs()).max((s.x[1] - t).abs());
    }
    let mut fd_err = 0.0f64;
    for _ in 0..50 {
        let m = rng.gen_range(1..8);
        let g = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q = (0..m).map(|_| rng.gen_range(0.1..10.0)).collect();
        let lam = (0..m).map(|_| rng.gen_range(0.0..5.0)).collect();
        let reg = SeparableObjective::quad_plus_p(g, q, lam, 4);
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        fd_err = fd_err.max(derivative_error(&reg, &x));
        let barrier = (0..m)
            .map(|_| {
                let f = rng.gen_range(0.2..0.8);
                Some(BarrierPair {
                    wplus: rng.gen_range(1.0..3.0),
                    wminus: rng.gen_range(1.0..3.0),
                    splus: 1.0 - f,
                    sminus: f,
                })
            })
            .collect();
        let bar = SeparableObjective {
            g: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            q: vec![0.0; m],
            barrier,
            lam: (0..m).map(|_| rng.gen_range(0.0..5.0)).collect(),
            p: 4,
        };
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.3..0.3)).collect();
        fd_err = fd_err.max(derivative_error(&bar, &x));
    }
    let pass = qp_err <= 1e-7 && newton_err <= 1e-6 && fd_err <= 1e-5;
    (
        pass,
        format!("dense QP max err {qp_err:.1e}, 2-cycle Newton max err {newton_err:.1e}, derivative max rel err {fd_err:.1e}"),
    )
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    let problems = instances();
    let infeasible = problems.iter().filter(|p| ssp_solve(p).status == Status::Infeasible).count();
    println!(
        "acceptance: {} instances ({} infeasible), n <= 30, m <= 120, |c| <= 20",
        problems.len(),
        infeasible
    );

    let methods = [Method::Vanilla, Method::Eleven8, Method::Four3];
    let mut all: Vec<(Method, Vec<Run>)> = Vec::new();
    for method in methods {
        let start = Instant::now();
        let runs: Vec<Run> = problems.par_iter().map(|p| run_one(p, method)).collect();
        println!("  {method}: {:.1} s", start.elapsed().as_secs_f64());
        all.push((method, runs));
    }
    let runs_of = |m: Method| &all.iter().find(|(x, _)| *x == m).unwrap().1;

    // 1. Exactness.
    let mut detail = Vec::new();
    let mut pass = true;
    for (method, runs) in &all {
        let errors: Vec<String> = runs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.error.as_ref().map(|e| format!("#{i}: {e}")))
            .collect();
        let wrong = runs.iter().filter(|r| r.error.is_none() && !r.exact).count();
        let certified = runs.iter().filter(|r| r.infeasible && r.exact).count();
        pass &= errors.is_empty() && wrong == 0;
        detail.push(format!(
            "{method} {}/{} exact ({certified}/{infeasible} infeasible certified){}",
            runs.iter().filter(|r| r.exact).count(),
            runs.len(),
            errors.first().map(|e| format!(", first error {e}")).unwrap_or_default()
        ));
    }
    report.line(1, "exactness", pass, detail.join("; "));

    // 2. Duality-gap identity.
    let gap = worst(all.iter().flat_map(|(_, r)| r), |r| r.max_gap_err);
    let obj = worst(all.iter().flat_map(|(_, r)| r), |r| r.max_objective_err);
    let checkpoints: usize = all.iter().flat_map(|(_, r)| r).map(|r| r.checkpoints).sum();
    report.line(
        2,
        "gap identity",
        gap <= 1e-9 && checkpoints > 0,
        format!("{checkpoints} checkpoints, max |gap - mu||w||_1| / mu||w||_1 = {gap:.1e} (relative to objectives {obj:.1e})"),
    );

    // 3. Energy contraction.
    let pairs: Vec<(f64, f64)> = runs_of(Method::Vanilla)
        .iter()
        .flat_map(|r| r.contraction.iter().copied())
        .filter(|&(e, _)| e <= 0.25)
        .collect();
    let bad = pairs.iter().filter(|&&(e, e2)| e2 > 2.0 * e * e + 1e-12).count();
    report.line(
        3,
        "energy contraction",
        pairs.len() >= 1000 && bad == 0,
        format!("{} correction steps with E <= 1/4, {bad} with E' > 2E^2 + 1e-12", pairs.len()),
    );

    // 4. Predictor bound.
    let vr = runs_of(Method::Vanilla);
    let energies: Vec<f64> = vr.iter().flat_map(|r| r.predictor.iter().copied()).collect();
    let emax = energies.iter().copied().fold(0.0, f64::max);
    let halvings: usize = vr.iter().map(|r| r.halvings).sum();
    report.line(
        4,
        "predictor bound",
        !energies.is_empty() && emax <= 0.25 + 1e-9,
        format!("{} predictor steps, max energy {emax:.4}, {halvings} delta halvings", energies.len()),
    );

    // 5. Initialization.
    let mut init_faults = Vec::new();
    let mut max_mu = 0.0f64;
    let mut max_cent = 0.0f64;
    for (i, p) in problems.iter().enumerate() {
        let aug = augment_for_init(p);
        let ap = &aug.problem;
        let mut ipm = Ipm::new(ap);
        match ipm.initialize() {
            Ok(st) => {
                let c2 = ap.cost_two_norm();
                let cent = ipm.centrality_error(&st).unwrap_or(f64::INFINITY);
                max_mu = max_mu.max(st.mu_f64() / (2.0 * c2.max(f64::MIN_POSITIVE)));
                max_cent = max_cent.max(cent);
                if st.mu_f64() > 2.0 * c2 || st.min_weight() < 1.0 || st.norm_w1() > 2.0 * ap.m() as f64 + 1.0 || cent > 1e-8 {
                    init_faults.push(i);
                }
            }
            Err(e) => {
                eprintln!("init #{i}: {e}");
                init_faults.push(i);
            }
        }
    }
    report.line(
        5,
        "initialization",
        init_faults.is_empty(),
        format!("{} faults; max mu / 2||c||_2 = {max_mu:.3}, max centrality {max_cent:.1e}", init_faults.len()),
    );

    // 6. Accel step guarantees.
    let mut detail = Vec::new();
    let mut pass = true;
    for method in [Method::Eleven8, Method::Four3] {
        let runs = runs_of(method);
        let steps: usize = runs.iter().map(|r| r.steps).sum();
        let faults: Vec<&String> = runs.iter().flat_map(|r| r.step_faults.iter()).collect();
        pass &= faults.is_empty() && steps > 0;
        detail.push(format!(
            "{method} {steps} steps, {} violations{}",
            faults.len(),
            faults.first().map(|f| format!(" ({f})")).unwrap_or_default()
        ));
    }
    report.line(6, "accel step guarantees", pass, detail.join("; "));

    // 7. Weight budget and monotone weights.
    let accel = || [Method::Eleven8, Method::Four3].into_iter().flat_map(|m| runs_of(m).iter());
    let ratio = worst(accel(), |r| r.max_norm_ratio);
    let min_change = accel().chain(vr.iter()).map(|r| r.min_weight_change).fold(0.0, f64::min);
    report.line(
        7,
        "weight budget",
        ratio <= 1.0 && min_change >= 0.0,
        format!("max ||w||_1 / 3m = {ratio:.3}, smallest per-arc weight change {min_change:.1e}"),
    );

    // 8. Demand ledger.
    let ledger = worst(accel(), |r| r.ledger);
    let over = accel().filter(|r| r.demand_l1 > r.demand_budget).count();
    let use_max = worst(accel(), |r| r.demand_l1 / r.demand_budget);
    report.line(
        8,
        "demand ledger",
        ledger <= 1e-8 && over == 0,
        format!("max |B^T f - d_cur| = {ledger:.1e}; perturbation over budget on {over} runs, max share of budget {use_max:.3}"),
    );

    // 9. Oracle cross-validation.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut infeasible_small = 0;
    for i in 0..100 {
        let n = rng.gen_range(2..=7);
        let m = rng.gen_range(n - 1..=14);
        let p = if i % 2 == 0 {
            gen::random_feasible(&mut rng, n, m, 20)
        } else {
            gen::random_demand(&mut rng, n, m, 20)
        };
        let a = ssp_solve(&p);
        let b = brute_force_solve(&p).unwrap();
        infeasible_small += usize::from(b.status == Status::Infeasible);
        if a.status != b.status || (a.status == Status::Optimal && a.cost != b.cost) {
            mismatches += 1;
        }
    }
    report.line(
        9,
        "oracle cross-validation",
        mismatches == 0,
        format!("100 instances with m <= 14 ({infeasible_small} infeasible), {mismatches} mismatches"),
    );

    // 10. Mixed solver.
    let (pass, detail) = criterion_10();
    report.line(10, "mixed solver", pass, detail);

    // 11. Iteration scaling, reported only.
    let start = Instant::now();
    let cfg = BenchConfig {
        sizes: vec![64, 128, 256, 512],
        count: 1,
        seed: 11,
        max_cost: 20,
        solve: SolveConfig::new(Method::Vanilla),
    };
    let records = run_bench(&cfg);
    let summary = summarize(&records);
    let mut within = records.iter().all(|r| r.error.is_none()) && summary.len() == 4;
    let mut parts = Vec::new();
    for s in &summary {
        parts.push(format!("m={} {:.0} it", s.size, s.mean_iterations));
        if let Some(ratio) = s.ratio {
            let target = s.sqrt_ratio.unwrap();
            within &= (ratio - target).abs() <= 0.35 * target;
            parts.push(format!("ratio {ratio:.3}"));
        }
    }
    for method in [Method::Eleven8, Method::Four3] {
        let ks: Vec<f64> = runs_of(method).iter().filter_map(|r| r.k_factor).collect();
        let kmax = ks.iter().copied().fold(0.0, f64::max);
        let kmean = ks.iter().sum::<f64>() / ks.len().max(1) as f64;
        parts.push(format!("{method} iterations * delta / ln(m mu0 / eps) mean {kmean:.2} max {kmax:.2}"));
    }
    let tag = if within { "PASS" } else { "FAIL" };
    println!(
        "{tag} criterion 11 (iteration scaling, reported): vanilla {}; {:.0} s",
        parts.join(", "),
        start.elapsed().as_secs_f64()
    );

    if report.failed.is_empty() {
        println!("acceptance: all gated criteria pass");
    } else {
        println!("acceptance: failed criteria {:?}", report.failed);
        std::process::exit(1);
    }
}
