//! Random instance families for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::{Arc, Problem};

/// Connected multigraph on n vertices with m >= n - 1 arcs: a random
/// spanning tree with random orientations plus uniformly random extra arcs.
pub fn random_arcs<R: Rng>(rng: &mut R, n: usize, m: usize, max_cost: i64) -> Vec<Arc> {
    assert!(n >= 2 && m + 1 >= n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut arcs = Vec::with_capacity(m);
    let cost = |rng: &mut R| rng.gen_range(-max_cost..=max_cost);
    for i in 1..n {
        let (u, v) = (order[i], order[rng.gen_range(0..i)]);
        let (tail, head) = if rng.gen() { (u, v) } else { (v, u) };
        arcs.push(Arc { tail, head, cost: cost(rng) });
    }
    while arcs.len() < m {
        let tail = rng.gen_range(0..n);
        let head = rng.gen_range(0..n);
        if tail != head {
            arcs.push(Arc { tail, head, cost: cost(rng) });
        }
    }
    arcs.shuffle(rng);
    arcs
}

/// Feasible instance: the demand is the divergence of a random 0/1 flow.
pub fn random_feasible<R: Rng>(rng: &mut R, n: usize, m: usize, max_cost: i64) -> Problem {
    let arcs = random_arcs(rng, n, m, max_cost);
    let density = rng.gen_range(0.1..0.6);
    let mut demand = vec![0i64; n];
    for a in &arcs {
        if rng.gen_bool(density) {
            demand[a.head] += 1;
            demand[a.tail] -= 1;
        }
    }
    Problem::new(n, arcs, demand).expect("generated instance is valid")
}

/// Instance with an arbitrary balanced demand, feasible or not.
pub fn random_demand<R: Rng>(rng: &mut R, n: usize, m: usize, max_cost: i64) -> Problem {
    let arcs = random_arcs(rng, n, m, max_cost);
    let units = rng.gen_range(1..=n.max(2));
    let mut demand = vec![0i64; n];
    for _ in 0..units {
        let s = rng.gen_range(0..n);
        let mut t = rng.gen_range(0..n);
        while t == s {
            t = rng.gen_range(0..n);
        }
        demand[s] -= 1;
        demand[t] += 1;
    }
    Problem::new(n, arcs, demand).expect("generated instance is valid")
}

/// Sizes used by the differential tests: n in [3, max_n] and
/// m in [n, min(max_m, 4n)].
pub fn random_size<R: Rng>(rng: &mut R, max_n: usize, max_m: usize) -> (usize, usize) {
    let n = rng.gen_range(3..=max_n);
    let m = rng.gen_range(n..=max_m.min(4 * n).max(n));
    (n, m)
}
