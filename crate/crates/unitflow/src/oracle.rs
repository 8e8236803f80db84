//! Exact combinatorial solvers used as ground truth.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::graph::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExactSolution {
    pub status: Status,
    pub flow: Vec<u8>,
    pub cost: i64,
    /// Potentials with c_e + pi_tail - pi_head >= 0 on every residual arc.
    pub potentials: Vec<i64>,
}

impl ExactSolution {
    fn infeasible(p: &Problem) -> Self {
        ExactSolution {
            status: Status::Infeasible,
            flow: vec![0; p.m()],
            cost: 0,
            potentials: vec![0; p.n],
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("brute force supports at most 20 arcs, got {0}")]
    TooLarge(usize),
}

const INF: i64 = i64::MAX / 4;

/// Residual network with integer capacities, solved by successive shortest
/// paths with Dijkstra on reduced costs.
#[derive(Debug, Clone)]
pub(crate) struct ResidualNet {
    pub n: usize,
    to: Vec<usize>,
    cap: Vec<i64>,
    cost: Vec<i64>,
    adj: Vec<Vec<usize>>,
    pub pot: Vec<i64>,
}

impl ResidualNet {
    pub fn new(n: usize) -> Self {
        ResidualNet {
            n,
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            adj: vec![Vec::new(); n],
            pot: vec![0; n],
        }
    }

    /// Adds u -> v and its reverse; returns the forward edge id. The reverse
    /// edge is `id ^ 1`.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: i64, cost: i64) -> usize {
        let id = self.to.len();
        self.to.push(v);
        self.cap.push(cap);
        self.cost.push(cost);
        self.adj[u].push(id);
        self.to.push(u);
        self.cap.push(0);
        self.cost.push(-cost);
        self.adj[v].push(id + 1);
        id
    }

    pub fn residual(&self, id: usize) -> i64 {
        self.cap[id]
    }

    pub fn flow(&self, id: usize) -> i64 {
        self.cap[id ^ 1]
    }

    pub fn tail(&self, id: usize) -> usize {
        self.to[id ^ 1]
    }

    pub fn head(&self, id: usize) -> usize {
        self.to[id]
    }

    pub fn edges(&self) -> usize {
        self.to.len()
    }

    pub fn push(&mut self, id: usize, amount: i64) {
        self.cap[id] -= amount;
        self.cap[id ^ 1] += amount;
    }

    pub fn reduced(&self, id: usize) -> i64 {
        self.cost[id] + self.pot[self.tail(id)] - self.pot[self.head(id)]
    }

    /// True when every residual edge has non-negative reduced cost.
    pub fn potentials_valid(&self) -> bool {
        (0..self.edges()).all(|id| self.cap[id] <= 0 || self.reduced(id) >= 0)
    }

    /// Bellman-Ford relaxation starting from the current potentials. On
    /// success the potentials are valid and None is returned; otherwise the
    /// edge ids of a negative residual cycle are returned.
    pub fn relax_potentials(&mut self) -> Option<Vec<usize>> {
        let mut parent = vec![usize::MAX; self.n];
        let mut last = usize::MAX;
        for _ in 0..=self.n {
            last = usize::MAX;
            for id in 0..self.edges() {
                if self.cap[id] > 0 {
                    let (u, v) = (self.tail(id), self.head(id));
                    if self.pot[u] + self.cost[id] < self.pot[v] {
                        self.pot[v] = self.pot[u] + self.cost[id];
                        parent[v] = id;
                        last = v;
                    }
                }
            }
            if last == usize::MAX {
                return None;
            }
        }
        // Still relaxing after n rounds: walking parents n times from the
        // last updated vertex lands on a cycle.
        let mut v = last;
        for _ in 0..self.n {
            v = self.tail(parent[v]);
        }
        let mut cycle = Vec::new();
        let start = v;
        loop {
            let id = parent[v];
            cycle.push(id);
            v = self.tail(id);
            if v == start {
                break;
            }
        }
        cycle.reverse();
        Some(cycle)
    }

    /// Dijkstra on reduced costs from s. Returns the parent edge per vertex
    /// and distances (INF when unreachable).
    fn dijkstra(&self, s: usize) -> (Vec<usize>, Vec<i64>) {
        let mut dist = vec![INF; self.n];
        let mut parent = vec![usize::MAX; self.n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0;
        heap.push(Reverse((0i64, s)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &id in &self.adj[u] {
                if self.cap[id] <= 0 {
                    continue;
                }
                let v = self.to[id];
                let nd = d + self.reduced(id);
                debug_assert!(self.reduced(id) >= 0);
                // Ties go to the lower edge id, so results are deterministic.
                if nd < dist[v] {
                    dist[v] = nd;
                    parent[v] = id;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        (parent, dist)
    }

    /// One augmenting phase: shortest s-t path on reduced costs, pushes the
    /// bottleneck (at most `limit`) and updates potentials. Returns the
    /// amount pushed, 0 when t is unreachable.
    pub fn augment(&mut self, s: usize, t: usize, limit: i64) -> i64 {
        let (parent, dist) = self.dijkstra(s);
        if dist[t] >= INF {
            return 0;
        }
        let cap_t = dist[t];
        for v in 0..self.n {
            self.pot[v] += dist[v].min(cap_t);
        }
        let mut amount = limit;
        let mut v = t;
        while v != s {
            let id = parent[v];
            amount = amount.min(self.cap[id]);
            v = self.tail(id);
        }
        let mut v = t;
        while v != s {
            let id = parent[v];
            self.push(id, amount);
            v = self.tail(id);
        }
        amount
    }
}

/// Exact optimum by successive shortest paths.
///
/// Arcs with negative cost are saturated up front. Their residual copies
/// then have positive cost, so zero potentials start out valid and no
/// Bellman-Ford pass is needed.
pub fn ssp_solve(p: &Problem) -> ExactSolution {
    let n = p.n;
    let (s, t) = (n, n + 1);
    let mut net = ResidualNet::new(n + 2);
    let mut need: Vec<i64> = p.demand.clone();
    let mut ids = Vec::with_capacity(p.m());
    for a in &p.arcs {
        let id = net.add_edge(a.tail, a.head, 1, a.cost);
        if a.cost < 0 {
            net.push(id, 1);
            need[a.head] -= 1;
            need[a.tail] += 1;
        }
        ids.push(id);
    }
    let mut total = 0;
    for (v, &x) in need.iter().enumerate() {
        if x < 0 {
            net.add_edge(s, v, -x, 0);
        } else if x > 0 {
            net.add_edge(v, t, x, 0);
            total += x;
        }
    }
    let mut routed = 0;
    while routed < total {
        let got = net.augment(s, t, total - routed);
        if got == 0 {
            return ExactSolution::infeasible(p);
        }
        routed += got;
    }
    let flow: Vec<u8> = ids.iter().map(|&id| net.flow(id) as u8).collect();
    let cost = p.cost_of(&flow);
    let potentials = net.pot[..n].to_vec();
    let sol = ExactSolution { status: Status::Optimal, flow, cost, potentials };
    debug_assert!(check_certificate(p, &sol));
    sol
}

/// Independent optimality check: the flow routes the demand and every
/// residual arc has non-negative reduced cost.
pub fn check_certificate(p: &Problem, sol: &ExactSolution) -> bool {
    if sol.status != Status::Optimal {
        return true;
    }
    if p.divergence_int(&sol.flow) != p.demand || p.cost_of(&sol.flow) != sol.cost {
        return false;
    }
    let pi = &sol.potentials;
    p.arcs.iter().zip(&sol.flow).all(|(a, &f)| {
        let r = a.cost + pi[a.tail] - pi[a.head];
        match f {
            0 => r >= 0,
            1 => r <= 0,
            _ => false,
        }
    })
}

/// Enumerates all 0/1 flows in Gray-code order.
pub fn brute_force_solve(p: &Problem) -> Result<ExactSolution, OracleError> {
    let m = p.m();
    if m > 20 {
        return Err(OracleError::TooLarge(m));
    }
    let mut div = vec![0i64; p.n];
    let mut wrong = p.demand.iter().filter(|&&d| d != 0).count();
    let mut cost = 0i64;
    let mut best: Option<(i64, u32)> = if wrong == 0 { Some((0, 0)) } else { None };
    let mut gray = 0u32;
    let bump = |v: usize, delta: i64, div: &mut Vec<i64>, wrong: &mut usize| {
        let before = div[v] == p.demand[v];
        div[v] += delta;
        let after = div[v] == p.demand[v];
        if before && !after {
            *wrong += 1;
        } else if !before && after {
            *wrong -= 1;
        }
    };
    for k in 1u32..(1u32 << m) {
        let e = k.trailing_zeros() as usize;
        gray ^= 1 << e;
        let a = p.arcs[e];
        let sign = if gray >> e & 1 == 1 { 1 } else { -1 };
        cost += sign * a.cost;
        bump(a.head, sign, &mut div, &mut wrong);
        bump(a.tail, -sign, &mut div, &mut wrong);
        if wrong == 0 && best.map_or(true, |(c, _)| cost < c) {
            best = Some((cost, gray));
        }
    }
    Ok(match best {
        None => ExactSolution::infeasible(p),
        Some((cost, mask)) => ExactSolution {
            status: Status::Optimal,
            flow: (0..m).map(|e| (mask >> e & 1) as u8).collect(),
            cost,
            potentials: vec![0; p.n],
        },
    })
}
