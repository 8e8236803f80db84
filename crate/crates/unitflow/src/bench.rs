//! Instance families and iteration-scaling measurements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::oracle::{self, Status};
use crate::{gen, repair};
use crate::solve::{run_ipm, solve_verified, Method, SolveConfig};

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    /// Arc counts; each instance has n = max(4, m / 4) vertices.
    pub sizes: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    pub max_cost: i64,
    pub solve: SolveConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub size: usize,
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub m_aug: usize,
    pub method: Method,
    pub iterations: usize,
    /// Smallest delta used by an accelerated run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_delta: Option<f64>,
    pub max_norm_w: f64,
    pub demand_perturbation: f64,
    pub cost: Option<i64>,
    pub oracle_cost: Option<i64>,
    pub violations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeSummary {
    pub size: usize,
    pub instances: usize,
    pub mean_iterations: f64,
    /// mean iterations here over mean iterations at the previous size.
    pub ratio: Option<f64>,
    /// sqrt(size / previous size).
    pub sqrt_ratio: Option<f64>,
    /// mean of iterations * delta for accelerated runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_times_delta: Option<f64>,
}

fn instance_seed(seed: u64, size: usize, index: usize) -> u64 {
    seed ^ ((size as u64) << 32) ^ index as u64
}

fn run_one(cfg: &BenchConfig, size: usize, index: usize) -> BenchRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(cfg.seed, size, index));
    let m = size.max(3);
    let n = (m / 4).max(4).min(m + 1);
    let p = gen::random_feasible(&mut rng, n, m, cfg.max_cost);
    let aug = crate::graph::augment_for_init(&p);
    let mut rec = BenchRecord {
        size,
        index,
        n,
        m,
        m_aug: aug.problem.m(),
        method: cfg.solve.method,
        iterations: 0,
        min_delta: None,
        max_norm_w: 0.0,
        demand_perturbation: 0.0,
        cost: None,
        oracle_cost: None,
        violations: Vec::new(),
        error: None,
    };
    if cfg.solve.method == Method::Oracle {
        match solve_verified(&p, &cfg.solve) {
            Ok(r) => {
                rec.cost = r.cost;
                rec.oracle_cost = r.oracle_cost;
                rec.violations = r.violations;
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        return rec;
    }
    let out = match run_ipm(&aug, &cfg.solve) {
        Ok(out) => out,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.iterations = out.iterations();
    rec.min_delta = out.accel.as_ref().map(|a| a.min_delta);
    rec.max_norm_w = out.trace.norm_w.iter().copied().fold(0.0, f64::max);
    rec.demand_perturbation = out.demand_perturbation();
    let exact = oracle::ssp_solve(&p);
    rec.oracle_cost = (exact.status == Status::Optimal).then_some(exact.cost);
    match repair::repair(&aug, &out.state) {
        Ok(r) => {
            rec.cost = r.cost;
            if r.cost != rec.oracle_cost {
                rec.violations.push(format!("cost {:?} but oracle {:?}", r.cost, rec.oracle_cost));
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Runs `count` instances per size in parallel. The output order and content
/// depend only on the configuration.
pub fn run_bench(cfg: &BenchConfig) -> Vec<BenchRecord> {
    let jobs: Vec<(usize, usize)> =
        cfg.sizes.iter().flat_map(|&s| (0..cfg.count).map(move |i| (s, i))).collect();
    jobs.par_iter().map(|&(s, i)| run_one(cfg, s, i)).collect()
}

pub fn summarize(records: &[BenchRecord]) -> Vec<SizeSummary> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.size).collect();
    sizes.dedup();
    let mut out: Vec<SizeSummary> = Vec::new();
    for size in sizes {
        let rs: Vec<&BenchRecord> = records.iter().filter(|r| r.size == size && r.error.is_none()).collect();
        if rs.is_empty() {
            continue;
        }
        let mean = rs.iter().map(|r| r.iterations as f64).sum::<f64>() / rs.len() as f64;
        let itd: Vec<f64> = rs.iter().filter_map(|r| r.min_delta.map(|d| d * r.iterations as f64)).collect();
        let prev = out.last();
        out.push(SizeSummary {
            size,
            instances: rs.len(),
            mean_iterations: mean,
            ratio: prev.map(|p| mean / p.mean_iterations),
            sqrt_ratio: prev.map(|p| (size as f64 / p.size as f64).sqrt()),
            iterations_times_delta: if itd.is_empty() { None } else { Some(itd.iter().sum::<f64>() / itd.len() as f64) },
        });
    }
    out
}
