use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitflow::bench::{run_bench, BenchConfig};
use unitflow::electrical::CorrectionFlow;
use unitflow::gen;
use unitflow::graph::{augment_for_init, Arc, Problem};
use unitflow::ipm::Ipm;
use unitflow::oracle::{brute_force_solve, ssp_solve, Status};
use unitflow::repair::{b_vector, fix_matching, flow_to_matching, matching_to_flow, repair};
use unitflow::solve::{run_ipm, solve, solve_verified, Method, SolveConfig};
use unitflow::state::{to_f64, FlowState};

#[test]
fn perfect_correction_single_arc() {
    let p = Problem::new(2, vec![Arc { tail: 0, head: 1, cost: 0 }], vec![0, 0]).unwrap();
    let mut ipm = Ipm::new(&p);
    let mut st = FlowState::halves(2, 1, 2.0);
    let cf = CorrectionFlow {
        flow: vec![0.05],
        phi: vec![0.0, 0.0],
        rho_plus: vec![0.1],
        rho_minus: vec![-0.1],
        energy: 0.01,
    };
    ipm.perfect_correction(&mut st, &cf, None).unwrap();
    assert_abs_diff_eq!(to_f64(st.wplus[0]), 1.1 / 0.9, epsilon = 1e-15);
    assert_abs_diff_eq!(to_f64(st.wminus[0]), 1.0, epsilon = 1e-15);
    // mu moves the other way from w so that both parts of the gradient
    // scale by the same factor.
    assert_abs_diff_eq!(st.mu_f64(), 2.0 * 0.9, epsilon = 1e-15);
}

#[test]
fn initialization_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let (n, m) = gen::random_size(&mut rng, 12, 40);
        let p = gen::random_demand(&mut rng, n, m, 20);
        let aug = augment_for_init(&p);
        let ap = &aug.problem;
        let mut ipm = Ipm::new(ap);
        let st = ipm.initialize().unwrap();
        let c2 = ap.cost_two_norm();
        assert!(st.mu_f64() <= 2.0 * c2);
        assert!(st.min_weight() >= 1.0);
        assert!(st.norm_w1() <= 2.0 * ap.m() as f64 + 1.0);
        assert!(ipm.trace.last_start_energy <= 0.125 + 1e-12);
        assert!(ipm.centrality_error(&st).unwrap() <= 1e-9);
        for &(e, e2) in &ipm.trace.contraction {
            if e <= 0.25 {
                assert!(e2 <= 2.0 * e * e + 1e-12);
            }
        }
    }
}

fn central_state(seed: u64, n: usize, m: usize) -> (unitflow::graph::AugmentedProblem, FlowState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = gen::random_feasible(&mut rng, n, m, 10);
    let aug = augment_for_init(&p);
    let out = run_ipm(&aug, &SolveConfig::new(Method::Vanilla)).unwrap();
    (aug, out.state)
}

#[test]
fn matching_duals_from_both_endpoints_agree() {
    for seed in 0..10 {
        let (aug, st) = central_state(seed, 6, 12);
        let p = &aug.problem;
        let inst = flow_to_matching(p, &st).unwrap();
        let mu = st.mu_f64();
        for e in 0..p.m() {
            let a = p.arcs[e];
            let (wp, wm) = (to_f64(st.wplus[e]), to_f64(st.wminus[e]));
            let (sp, sm) = (to_f64(st.splus(e)), to_f64(st.sminus(e)));
            let via_tail = a.cost as f64 - inst.y1[a.tail] - mu * wm / sm;
            let via_head = -inst.y1[a.head] - mu * wp / sp;
            let scale = 1.0 + mu * (wm / sm + wp / sp) + a.cost.abs() as f64;
            assert!((via_tail - via_head).abs() <= 1e-8 * scale, "arc {e}: {via_tail} vs {via_head}");
        }
        let gap = inst.duality_gap();
        assert!((gap - st.gap()).abs() <= 1e-8 * (1.0 + st.gap()), "{gap} vs {}", st.gap());
    }
}

#[test]
fn fixed_matching_is_optimal_against_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 20 {
        let n = rng.gen_range(3..=4);
        let m = rng.gen_range(n - 1..=5);
        let p = gen::random_demand(&mut rng, n, m, 10);
        let aug = augment_for_init(&p);
        if aug.problem.m() > 8 {
            continue;
        }
        checked += 1;
        let out = run_ipm(&aug, &SolveConfig::new(Method::Vanilla)).unwrap();
        let ap = &aug.problem;
        let inst = flow_to_matching(ap, &out.state).unwrap();
        let fixed = fix_matching(&inst, &b_vector(ap, &ap.demand)).unwrap().expect("d itself is routable");
        let (flow, zp, zm) = matching_to_flow(&inst, &fixed).unwrap();
        assert!(zp.iter().chain(&zm).all(|&z| z >= 0));
        let best = brute_force_solve(ap).unwrap();
        assert_eq!(ap.cost_of(&flow), best.cost);
        assert_eq!(ap.divergence_int(&flow), ap.demand);
    }
}

#[test]
fn repair_matches_the_oracle_for_every_method() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..6 {
        let (n, m) = gen::random_size(&mut rng, 10, 30);
        let p = if i % 3 == 2 {
            gen::random_demand(&mut rng, n, m, 20)
        } else {
            gen::random_feasible(&mut rng, n, m, 20)
        };
        let exact = ssp_solve(&p);
        let aug = augment_for_init(&p);
        for method in [Method::Vanilla, Method::Eleven8, Method::Four3] {
            let out = run_ipm(&aug, &SolveConfig::new(method)).unwrap();
            let fixed = repair(&aug, &out.state).unwrap();
            match exact.status {
                Status::Optimal => assert_eq!(fixed.cost, Some(exact.cost), "{method} on instance {i}"),
                Status::Infeasible => assert_eq!(fixed.cost, None, "{method} on instance {i}"),
            }
        }
    }
}

#[test]
fn large_costs_go_through_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let p = gen::random_feasible(&mut rng, 8, 20, 1_000_000);
        let mut cfg = SolveConfig::new(Method::Vanilla);
        cfg.scaling_threshold = Some(1000);
        let report = solve_verified(&p, &cfg).unwrap();
        assert!(report.scaling_stages > 1);
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert_eq!(report.cost, Some(ssp_solve(&p).cost));
    }
}

#[test]
fn infeasible_instance_is_reported() {
    let arcs = vec![Arc { tail: 0, head: 1, cost: 1 }];
    let p = Problem::new(2, arcs, vec![-2, 2]).unwrap();
    for method in [Method::Vanilla, Method::Eleven8, Method::Four3, Method::Oracle] {
        let report = solve(&p, &SolveConfig::new(method)).unwrap();
        assert_eq!(report.status, Status::Infeasible, "{method}");
        assert_eq!(report.cost, None);
    }
}

#[test]
fn bench_is_deterministic() {
    let cfg = BenchConfig {
        sizes: vec![16, 24],
        count: 2,
        seed: 3,
        max_cost: 20,
        solve: SolveConfig::new(Method::Vanilla),
    };
    let a = serde_json::to_string(&run_bench(&cfg)).unwrap();
    let b = serde_json::to_string(&run_bench(&cfg)).unwrap();
    assert_eq!(a, b);
    assert!(!a.contains("\"error\""));
}

#[test]
fn weights_only_grow_during_vanilla() {
    let (aug, _) = central_state(2, 8, 20);
    let out = run_ipm(&aug, &SolveConfig::new(Method::Vanilla)).unwrap();
    assert!(out.trace.min_weight_change >= 0.0, "{:e}", out.trace.min_weight_change);
    assert!(out.trace.norm_w.iter().all(|&w| w <= 3.0 * aug.problem.m() as f64));
}
