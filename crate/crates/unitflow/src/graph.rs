//! Instances, DIMACS input, and the two graph transformations used by the
//! interior point method: the initialization augmentation and the star
//! preconditioner.
//!
//! Demand convention: `d[v]` is inflow minus outflow at `v`. DIMACS supplies
//! are outflow-positive, so parsing negates them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: arc capacity {cap} is not 1")]
    UnsupportedCapacity { line: usize, cap: i64 },
    #[error("invalid instance: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc {
    pub tail: usize,
    pub head: usize,
    pub cost: i64,
}

/// Unit-capacity min-cost-flow instance. Every arc carries a flow in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub n: usize,
    pub arcs: Vec<Arc>,
    pub demand: Vec<i64>,
}

impl Problem {
    /// Validates and builds an instance.
    ///
    /// Rejects self-loops, out-of-range endpoints, unbalanced demand and
    /// disconnected graphs. Vertices with no arcs and zero demand are allowed;
    /// they do not take part in any flow.
    pub fn new(n: usize, arcs: Vec<Arc>, demand: Vec<i64>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Invalid("no vertices".into()));
        }
        if demand.len() != n {
            return Err(GraphError::Invalid(format!(
                "demand has length {}, expected {n}",
                demand.len()
            )));
        }
        for (i, a) in arcs.iter().enumerate() {
            if a.tail >= n || a.head >= n {
                return Err(GraphError::Invalid(format!("arc {i} has an endpoint out of range")));
            }
            if a.tail == a.head {
                return Err(GraphError::Invalid(format!("arc {i} is a self-loop")));
            }
        }
        let total: i64 = demand.iter().sum();
        if total != 0 {
            return Err(GraphError::Invalid(format!("demands sum to {total}, not 0")));
        }
        let p = Problem { n, arcs, demand };
        if !p.is_connected() {
            return Err(GraphError::Invalid("graph is disconnected".into()));
        }
        Ok(p)
    }

    pub fn m(&self) -> usize {
        self.arcs.len()
    }

    pub fn cost_inf_norm(&self) -> i64 {
        self.arcs.iter().map(|a| a.cost.abs()).max().unwrap_or(0)
    }

    pub fn cost_two_norm(&self) -> f64 {
        self.arcs
            .iter()
            .map(|a| (a.cost as f64) * (a.cost as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn tails(&self) -> Vec<usize> {
        self.arcs.iter().map(|a| a.tail).collect()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.arcs.iter().map(|a| a.head).collect()
    }

    pub fn costs(&self) -> Vec<i64> {
        self.arcs.iter().map(|a| a.cost).collect()
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for a in &self.arcs {
            d[a.head] += 1;
        }
        d
    }

    pub fn out_degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for a in &self.arcs {
            d[a.tail] += 1;
        }
        d
    }

    /// B^T f: inflow minus outflow at every vertex.
    pub fn divergence(&self, f: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for (a, &x) in self.arcs.iter().zip(f) {
            d[a.head] += x;
            d[a.tail] -= x;
        }
        d
    }

    pub fn divergence_int(&self, f: &[u8]) -> Vec<i64> {
        let mut d = vec![0i64; self.n];
        for (a, &x) in self.arcs.iter().zip(f) {
            d[a.head] += x as i64;
            d[a.tail] -= x as i64;
        }
        d
    }

    pub fn cost_of(&self, f: &[u8]) -> i64 {
        self.arcs.iter().zip(f).map(|(a, &x)| a.cost * x as i64).sum()
    }

    /// Connectivity ignoring orientation, over vertices that have an arc or a
    /// nonzero demand.
    fn is_connected(&self) -> bool {
        let mut uf = UnionFind::new(self.n);
        for a in &self.arcs {
            uf.union(a.tail, a.head);
        }
        let mut root = None;
        for v in 0..self.n {
            let relevant = self.demand[v] != 0 || uf.size(v) > 1;
            if !relevant {
                continue;
            }
            let r = uf.find(v);
            match root {
                None => root = Some(r),
                Some(r0) if r0 != r => return false,
                _ => {}
            }
        }
        true
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        true
    }

    pub(crate) fn size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }
}

/// Parses the DIMACS min-cost-flow format restricted to unit capacities.
pub fn parse_dimacs(text: &str) -> Result<Problem, GraphError> {
    let mut header: Option<(usize, usize)> = None;
    let mut supply: Vec<i64> = Vec::new();
    let mut arcs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut tok = raw.split_whitespace();
        let Some(kind) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let perr = |msg: &str| GraphError::Parse { line, msg: msg.to_string() };
        let int = |s: &str| s.parse::<i64>().map_err(|_| perr(&format!("bad integer '{s}'")));
        match kind {
            "c" => {}
            "p" => {
                if header.is_some() {
                    return Err(perr("duplicate problem line"));
                }
                if rest.len() != 3 || rest[0] != "min" {
                    return Err(perr("expected 'p min <n> <m>'"));
                }
                let n = int(rest[1])?;
                let m = int(rest[2])?;
                if n < 1 || m < 0 {
                    return Err(perr("vertex count must be positive and arc count non-negative"));
                }
                header = Some((n as usize, m as usize));
                supply = vec![0; n as usize];
            }
            "n" => {
                let (n, _) = header.ok_or_else(|| perr("node line before problem line"))?;
                if rest.len() != 2 {
                    return Err(perr("expected 'n <id> <supply>'"));
                }
                let id = int(rest[0])?;
                if id < 1 || id as usize > n {
                    return Err(perr("node id out of range"));
                }
                supply[id as usize - 1] += int(rest[1])?;
            }
            "a" => {
                let (n, _) = header.ok_or_else(|| perr("arc line before problem line"))?;
                if rest.len() != 5 {
                    return Err(perr("expected 'a <tail> <head> <low> <cap> <cost>'"));
                }
                let t = int(rest[0])?;
                let h = int(rest[1])?;
                let low = int(rest[2])?;
                let cap = int(rest[3])?;
                let cost = int(rest[4])?;
                if t < 1 || t as usize > n || h < 1 || h as usize > n {
                    return Err(perr("arc endpoint out of range"));
                }
                if low != 0 {
                    return Err(perr("nonzero lower bound"));
                }
                if cap != 1 {
                    return Err(GraphError::UnsupportedCapacity { line, cap });
                }
                arcs.push(Arc { tail: t as usize - 1, head: h as usize - 1, cost });
            }
            other => return Err(perr(&format!("unknown line type '{other}'"))),
        }
    }
    let (n, m) = header.ok_or(GraphError::Parse { line: 0, msg: "missing problem line".into() })?;
    if arcs.len() != m {
        return Err(GraphError::Parse {
            line: 0,
            msg: format!("header declares {m} arcs, found {}", arcs.len()),
        });
    }
    let demand = supply.iter().map(|s| -s).collect();
    Problem::new(n, arcs, demand)
}

pub fn to_dimacs(p: &Problem) -> String {
    let mut s = String::new();
    writeln!(s, "p min {} {}", p.n, p.m()).unwrap();
    for (v, &d) in p.demand.iter().enumerate() {
        if d != 0 {
            writeln!(s, "n {} {}", v + 1, -d).unwrap();
        }
    }
    for a in &p.arcs {
        writeln!(s, "a {} {} 0 1 {}", a.tail + 1, a.head + 1, a.cost).unwrap();
    }
    s
}

/// The instance on V ∪ {v0} whose all-halves flow routes the demand.
#[derive(Debug, Clone, Serialize)]
pub struct AugmentedProblem {
    pub base: Problem,
    /// Combined instance; arcs `0..base.m()` are the original ones.
    pub problem: Problem,
    pub aux: Vec<bool>,
    pub v0: usize,
    pub c_inf: i64,
}

impl AugmentedProblem {
    pub fn aux_count(&self) -> usize {
        self.aux.iter().filter(|&&a| a).count()
    }
}

/// Adds high-cost arcs through a new vertex v0 so that f = 1/2 on every arc
/// routes the demand.
///
/// With l(v) = d_v - (in(v) - out(v))/2 the all-halves flow is short by l(v)
/// units of inflow at v, so v gets 2 l(v) arcs from v0 when l(v) > 0 and
/// -2 l(v) arcs to v0 when l(v) < 0.
pub fn augment_for_init(p: &Problem) -> AugmentedProblem {
    let m = p.m();
    let c_inf = (m as i64 + 1) * p.cost_inf_norm().max(1);
    let v0 = p.n;
    let indeg = p.in_degree();
    let outdeg = p.out_degree();
    let mut arcs = p.arcs.clone();
    let mut aux = vec![false; m];
    for v in 0..p.n {
        // 2 l(v), kept integral.
        let two_l = 2 * p.demand[v] - (indeg[v] as i64 - outdeg[v] as i64);
        let (tail, head) = if two_l > 0 { (v0, v) } else { (v, v0) };
        for _ in 0..two_l.unsigned_abs() {
            arcs.push(Arc { tail, head, cost: c_inf });
            aux.push(true);
        }
    }
    let mut demand = p.demand.clone();
    demand.push(0);
    let problem = Problem { n: p.n + 1, arcs, demand };
    AugmentedProblem { base: p.clone(), problem, aux, v0, c_inf }
}

/// Star preconditioner: `counts[v]` parallel edges v -> v*, where the count is
/// the ceiling of the weighted degree of v.
#[derive(Debug, Clone, PartialEq)]
pub struct StarGraph {
    pub n: usize,
    pub star: usize,
    pub counts: Vec<u64>,
}

impl StarGraph {
    pub fn total_edges(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn build_star_graph(p: &Problem, wplus: &[f64], wminus: &[f64]) -> StarGraph {
    let mut deg = vec![0.0; p.n];
    for (i, a) in p.arcs.iter().enumerate() {
        let w = wplus[i] + wminus[i];
        deg[a.tail] += w;
        deg[a.head] += w;
    }
    let counts = deg.iter().map(|&d| d.ceil() as u64).collect();
    StarGraph { n: p.n, star: p.n, counts }
}
