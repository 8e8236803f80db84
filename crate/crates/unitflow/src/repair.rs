//! Rounding a near-optimal central flow to an exactly optimal integral flow.
//!
//! The flow problem is rewritten as a perfect b-matching on V1 ∪ V2 with one
//! V2 vertex per arc e = (u, v) and gadget edges (u, v_e) of cost c_e and
//! (v, v_e) of cost 0. Matching (u, v_e) means the arc carries flow.

use serde::Serialize;

use crate::graph::{AugmentedProblem, Problem};
use crate::oracle::ResidualNet;
use crate::state::{ddiv, to_f64, Dd, FlowState};

#[derive(Debug, thiserror::Error)]
pub enum RepairError {
    #[error("dual propagation is inconsistent by {0:e}; the state is not central")]
    NotCentral(f64),
    #[error("complementary slackness violated on arc {0}")]
    Slackness(usize),
    #[error("dual infeasible on arc {0} after an augmentation phase")]
    DualInfeasible(usize),
    #[error("target b-vector has length {0}, expected {1}")]
    Shape(usize, usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchingInstance {
    pub n: usize,
    /// Arc list of the underlying flow problem; gadget e joins tail and head
    /// to the V2 vertex e.
    pub tail: Vec<usize>,
    pub head: Vec<usize>,
    pub cost: Vec<i64>,
    /// b on V1: |E_in(v)| - d_v. Every V2 vertex has b = 1.
    pub b: Vec<f64>,
    /// x on (tail_e, v_e); the edge (head_e, v_e) carries 1 - x.
    pub x: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

impl MatchingInstance {
    /// Reduced costs c_e - y_tail - y_e and -y_head - y_e of the two gadget
    /// edges of arc e.
    pub fn reduced_costs(&self, e: usize) -> (f64, f64) {
        (
            self.cost[e] as f64 - self.y1[self.tail[e]] - self.y2[e],
            -self.y1[self.head[e]] - self.y2[e],
        )
    }

    /// Sum of x times reduced cost over all gadget edges.
    pub fn duality_gap(&self) -> f64 {
        (0..self.x.len())
            .map(|e| {
                let (rt, rh) = self.reduced_costs(e);
                self.x[e] * rt + (1.0 - self.x[e]) * rh
            })
            .sum()
    }

    /// Degree of every V1 vertex under x.
    pub fn degrees(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.n];
        for e in 0..self.x.len() {
            deg[self.tail[e]] += self.x[e];
            deg[self.head[e]] += 1.0 - self.x[e];
        }
        deg
    }
}

/// b on V1 for an integral demand: |E_in(v)| - d_v.
pub fn b_vector(p: &Problem, demand: &[i64]) -> Vec<i64> {
    let indeg = p.in_degree();
    (0..p.n).map(|v| indeg[v] as i64 - demand[v]).collect()
}

/// Encodes a central state as a fractional b-matching with a dual whose gap
/// is mu ||w||_1.
///
/// y on V1 is propagated along a spanning forest from the identity
/// y_tail - y_head = c + mu w+/s+ - mu w-/s-, which holds on every arc of a
/// central state; non-tree arcs are checked against it.
pub fn flow_to_matching(p: &Problem, st: &FlowState) -> Result<MatchingInstance, RepairError> {
    let m = p.m();
    let mu = st.mu;
    let drop: Vec<Dd> = (0..m)
        .map(|e| {
            let c = p.arcs[e].cost as f64;
            mu * (ddiv(st.wplus[e], st.splus(e)) - ddiv(st.wminus[e], st.sminus(e))) + c
        })
        .collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); p.n];
    for (e, a) in p.arcs.iter().enumerate() {
        adj[a.tail].push(e);
        adj[a.head].push(e);
    }
    let mut y: Vec<Option<Dd>> = vec![None; p.n];
    for root in 0..p.n {
        if y[root].is_some() {
            continue;
        }
        y[root] = Some(-st.psi[root]);
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            let yu = y[u].unwrap();
            for &e in &adj[u] {
                let a = p.arcs[e];
                let (other, val) = if a.tail == u { (a.head, yu - drop[e]) } else { (a.tail, yu + drop[e]) };
                if y[other].is_none() {
                    y[other] = Some(val);
                    queue.push_back(other);
                }
            }
        }
    }
    let y: Vec<Dd> = y.into_iter().map(Option::unwrap).collect();
    let scale = drop.iter().fold(1.0f64, |s, &d| s.max(to_f64(d).abs()));
    let worst = p
        .arcs
        .iter()
        .enumerate()
        .map(|(e, a)| to_f64(y[a.tail] - y[a.head] - drop[e]).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-7 * scale {
        return Err(RepairError::NotCentral(worst));
    }
    let y2: Vec<f64> = (0..m)
        .map(|e| {
            let a = p.arcs[e];
            to_f64(-y[a.tail] - ddiv(mu * st.wminus[e], st.sminus(e)) + a.cost as f64)
        })
        .collect();
    let div = st.divergence(p);
    let indeg = p.in_degree();
    Ok(MatchingInstance {
        n: p.n,
        tail: p.tails(),
        head: p.heads(),
        cost: p.costs(),
        b: (0..p.n).map(|v| indeg[v] as f64 - to_f64(div[v])).collect(),
        x: st.flow_f64(),
        y1: y.iter().map(|&v| to_f64(v)).collect(),
        y2,
    })
}

/// Optimal integral b-matching for the target, or None when no perfect
/// b-matching exists.
#[derive(Debug, Clone, Serialize)]
pub struct FixedMatching {
    pub x: Vec<u8>,
    pub y1: Vec<i64>,
    pub y2: Vec<i64>,
    /// Augmenting shortest-path phases used.
    pub phases: usize,
    /// Negative cycles canceled after rounding.
    pub cycles_canceled: usize,
}

/// Hungarian-style repair of a near-optimal fractional b-matching.
///
/// x is rounded (x >= 1/2 becomes 1) and the duals are rounded to integers.
/// Bellman-Ford relaxation seeded with the rounded duals turns them into
/// exact integral duals for the rounded matching, canceling any negative
/// cycle the rounding created. Each remaining unit of degree discrepancy is
/// then fixed by one Dijkstra augmenting path on reduced costs.
pub fn fix_matching(inst: &MatchingInstance, bhat: &[i64]) -> Result<Option<FixedMatching>, RepairError> {
    let n = inst.n;
    let m = inst.x.len();
    if bhat.len() != n {
        return Err(RepairError::Shape(bhat.len(), n));
    }
    // Nodes: V1 = 0..n, V2 = n..n+m, then source and sink.
    let (s, t) = (n + m, n + m + 1);
    let mut net = ResidualNet::new(n + m + 2);
    let mut ids = Vec::with_capacity(m);
    let mut deg = vec![0i64; n];
    for e in 0..m {
        let take = inst.x[e] >= 0.5;
        let a = net.add_edge(inst.tail[e], n + e, 1, inst.cost[e]);
        let b = net.add_edge(inst.head[e], n + e, 1, 0);
        net.push(if take { a } else { b }, 1);
        deg[if take { inst.tail[e] } else { inst.head[e] }] += 1;
        ids.push((a, b));
    }
    // Residual paths run from vertices that need more matches to those with
    // too many: a -> v_e adds the gadget edge, v_e -> a' removes one.
    let mut need = 0i64;
    for v in 0..n {
        let diff = bhat[v] - deg[v];
        if diff > 0 {
            net.add_edge(s, v, diff, 0);
            need += diff;
        } else if diff < 0 {
            net.add_edge(v, t, -diff, 0);
        }
    }
    if bhat.iter().sum::<i64>() != m as i64 {
        return Ok(None);
    }
    let mut seed: Vec<i64> = Vec::with_capacity(n + m + 2);
    seed.extend(inst.y1.iter().map(|&y| (-y).round() as i64));
    seed.extend(inst.y2.iter().map(|&y| y.round() as i64));
    let hi = seed[..n].iter().copied().max().unwrap_or(0);
    let lo = seed[..n].iter().copied().min().unwrap_or(0);
    seed.push(hi);
    seed.push(lo);
    net.pot = seed;
    let mut cycles_canceled = 0;
    while let Some(cycle) = net.relax_potentials() {
        for id in cycle {
            net.push(id, 1);
        }
        cycles_canceled += 1;
    }
    debug_assert!(net.potentials_valid());
    let mut phases = 0;
    let mut routed = 0;
    while routed < need {
        let got = net.augment(s, t, 1);
        if got == 0 {
            return Ok(None);
        }
        routed += got;
        phases += 1;
        for (e, &(a, b)) in ids.iter().enumerate() {
            if (net.residual(a) > 0 && net.reduced(a) < 0) || (net.residual(b) > 0 && net.reduced(b) < 0) {
                return Err(RepairError::DualInfeasible(e));
            }
        }
    }
    let x: Vec<u8> = ids.iter().map(|&(a, _)| net.flow(a) as u8).collect();
    let y1: Vec<i64> = net.pot[..n].iter().map(|&p| -p).collect();
    // The residual graph only bounds the matched gadget edge's reduced cost
    // from above; lowering y on V2 as far as feasibility allows makes it tight.
    let y2 = (0..m)
        .map(|e| (inst.cost[e] - y1[inst.tail[e]]).min(-y1[inst.head[e]]))
        .collect();
    Ok(Some(FixedMatching { x, y1, y2, phases, cycles_canceled }))
}

/// Flow and the bound duals z+ (upper) and z- (lower) of an optimal integral
/// b-matching, with complementary slackness checked exactly.
pub fn matching_to_flow(
    inst: &MatchingInstance,
    fixed: &FixedMatching,
) -> Result<(Vec<u8>, Vec<i64>, Vec<i64>), RepairError> {
    let m = fixed.x.len();
    let mut zp = Vec::with_capacity(m);
    let mut zm = Vec::with_capacity(m);
    for e in 0..m {
        let lower = inst.cost[e] - fixed.y1[inst.tail[e]] - fixed.y2[e];
        let upper = -fixed.y1[inst.head[e]] - fixed.y2[e];
        let f = fixed.x[e] as i64;
        if lower < 0 || upper < 0 || f * lower != 0 || (1 - f) * upper != 0 {
            return Err(RepairError::Slackness(e));
        }
        zm.push(lower);
        zp.push(upper);
    }
    Ok((fixed.x.clone(), zp, zm))
}

#[derive(Debug, Clone, Serialize)]
pub struct Repaired {
    /// None when the instance is infeasible.
    pub flow: Option<Vec<u8>>,
    pub cost: Option<i64>,
    pub phases: usize,
    pub cycles_canceled: usize,
    /// sum x (reduced cost) of the fractional matching.
    pub fractional_gap: f64,
}

/// Full repair on the augmented instance: an optimal flow for the base
/// instance's demand that uses no auxiliary arc, or an infeasibility verdict.
pub fn repair(aug: &AugmentedProblem, st: &FlowState) -> Result<Repaired, RepairError> {
    let inst = flow_to_matching(&aug.problem, st)?;
    let fractional_gap = inst.duality_gap();
    let mut target = aug.base.demand.clone();
    target.push(0);
    let bhat = b_vector(&aug.problem, &target);
    let Some(fixed) = fix_matching(&inst, &bhat)? else {
        return Ok(Repaired { flow: None, cost: None, phases: 0, cycles_canceled: 0, fractional_gap });
    };
    let (flow, _, _) = matching_to_flow(&inst, &fixed)?;
    let uses_aux = flow.iter().zip(&aug.aux).any(|(&f, &aux)| aux && f == 1);
    let base = &aug.base;
    let (flow, cost) = if uses_aux {
        (None, None)
    } else {
        let f = flow[..base.m()].to_vec();
        let c = base.cost_of(&f);
        (Some(f), Some(c))
    };
    Ok(Repaired { flow, cost, phases: fixed.phases, cycles_canceled: fixed.cycles_canceled, fractional_gap })
}
