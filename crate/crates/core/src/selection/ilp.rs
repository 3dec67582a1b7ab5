// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact connected selection by branch-and-bound over LP relaxations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::simplex::{solve, LpOutcome};
use super::{canonical_cmp, check_reachable, finish, is_connected, Selection, SelectionProblem};
use crate::error::{Error, Result};
use crate::graph::EdgeId;

/// Variable limit above which [`select_ilp`] refuses to solve.
pub const DEFAULT_MAX_VARIABLES: usize = 10_000;

const INTEGRALITY_TOL: f64 = 1e-6;
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IlpConfig {
    pub max_variables: usize,
    /// Branch-and-bound nodes explored before giving up.
    pub max_nodes: usize,
}

impl Default for IlpConfig {
    fn default() -> Self {
        Self {
            max_variables: DEFAULT_MAX_VARIABLES,
            max_nodes: 200_000,
        }
    }
}

/// Linear constraint `sum coef * x <= rhs` over edge ids.
struct Row {
    coef: Vec<(EdgeId, f64)>,
    rhs: f64,
}

fn constraints(problem: &SelectionProblem, quota: usize) -> Vec<Row> {
    let g = problem.scores.graph();
    let n = g.n_edges();
    let mut rows = vec![Row {
        coef: (0..n).map(|e| (e, 1.0)).collect(),
        rhs: problem.budget as f64,
    }];
    if problem.connected {
        for e in 0..n {
            let edge = g.edge(e);
            if edge.src != g.embedding() {
                let mut coef = vec![(e, 1.0)];
                coef.extend(g.incoming(edge.src).iter().map(|&f| (f, -1.0)));
                rows.push(Row { coef, rhs: 0.0 });
            }
            if edge.dst != g.logits() {
                let mut coef = vec![(e, 1.0)];
                coef.extend(g.outgoing(edge.dst).iter().map(|&f| (f, -1.0)));
                rows.push(Row { coef, rhs: 0.0 });
            }
        }
    }
    if quota > 0 {
        rows.push(Row {
            coef: problem.positive_pool().into_iter().map(|e| (e, -1.0)).collect(),
            rhs: -(quota as f64),
        });
    }
    rows
}

/// LP relaxation with some variables fixed; returns the bound and the full
/// edge assignment, or `None` when infeasible.
fn relax(problem: &SelectionProblem, rows: &[Row], fixed: &[Option<bool>]) -> Option<(f64, Vec<f64>)> {
    let n = fixed.len();
    let free: Vec<EdgeId> = (0..n).filter(|&e| fixed[e].is_none()).collect();
    let mut col = vec![usize::MAX; n];
    for (j, &e) in free.iter().enumerate() {
        col[e] = j;
    }
    let mut a = Vec::with_capacity(rows.len() + free.len());
    let mut b = Vec::with_capacity(rows.len() + free.len());
    for row in rows {
        let mut coeffs = vec![0.0; free.len()];
        let mut rhs = row.rhs;
        let mut any = false;
        for &(e, c) in &row.coef {
            match fixed[e] {
                Some(true) => rhs -= c,
                Some(false) => {}
                None => {
                    coeffs[col[e]] += c;
                    any = true;
                }
            }
        }
        if !any {
            if rhs < -BOUND_TOL {
                return None;
            }
            continue;
        }
        a.push(coeffs);
        b.push(rhs);
    }
    for j in 0..free.len() {
        let mut r = vec![0.0; free.len()];
        r[j] = 1.0;
        a.push(r);
        b.push(1.0);
    }
    let c: Vec<f64> = free.iter().map(|&e| problem.weight(e)).collect();
    let fixed_value: f64 = (0..n).filter(|&e| fixed[e] == Some(true)).map(|e| problem.weight(e)).sum();
    let mut x: Vec<f64> = fixed.iter().map(|f| if *f == Some(true) { 1.0 } else { 0.0 }).collect();
    if free.is_empty() {
        return Some((fixed_value, x));
    }
    match solve(&c, &a, &b) {
        LpOutcome::Optimal { x: xf, value } => {
            for (&e, v) in free.iter().zip(xf) {
                x[e] = v;
            }
            Some((fixed_value + value, x))
        }
        LpOutcome::Infeasible => None,
        LpOutcome::Unbounded => unreachable!("every variable is bounded by 1"),
    }
}

struct Node {
    bound: f64,
    seq: usize,
    fixed: Vec<Option<bool>>,
    x: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: highest bound first, then earliest created
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then_with(|| other.seq.cmp(&self.seq))
    }
}

fn feasible(problem: &SelectionProblem, member: &[bool], quota: usize) -> bool {
    let count = member.iter().filter(|&&m| m).count();
    let positives = (0..member.len()).filter(|&e| member[e] && problem.scores.get(e) > 0.0).count();
    count <= problem.budget && positives >= quota && (!problem.connected || is_connected(problem, member))
}

/// Maximizes the summed objective over circuits of at most `B` edges whose
/// edges are all supported; with a positive ratio, at least `round(rho * B)`
/// selected edges must have positive scores.
pub fn select_ilp(problem: &SelectionProblem, cfg: &IlpConfig) -> Result<Selection> {
    let n = problem.scores.graph().n_edges();
    if n > cfg.max_variables {
        return Err(Error::Budget(format!(
            "{n} edge variables exceed the exact-solve limit of {}",
            cfg.max_variables
        )));
    }
    check_reachable(problem)?;
    let (quota, short) = problem.positive_quota();
    let rows = constraints(problem, quota);
    let root = vec![None; n];
    let Some((bound, x)) = relax(problem, &rows, &root) else {
        return Err(Error::invalid("no connected circuit meets the positive-ratio constraint"));
    };
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    heap.push(Node {
        bound,
        seq,
        fixed: root,
        x,
    });
    let mut best: Option<(f64, Vec<EdgeId>)> = None;
    let mut explored = 0;
    while let Some(node) = heap.pop() {
        if let Some((inc, _)) = &best {
            if node.bound <= inc + BOUND_TOL {
                break;
            }
        }
        explored += 1;
        if explored > cfg.max_nodes {
            return Err(Error::Budget(format!("branch-and-bound exceeded {} nodes", cfg.max_nodes)));
        }
        let frac = (0..n)
            .filter(|&e| node.fixed[e].is_none())
            .map(|e| (e, (node.x[e] - node.x[e].round()).abs()))
            .filter(|&(_, d)| d > INTEGRALITY_TOL)
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some((branch, _)) = frac else {
            let member: Vec<bool> = node.x.iter().map(|&v| v > 0.5).collect();
            if feasible(problem, &member, quota) {
                let edges: Vec<EdgeId> = (0..n).filter(|&e| member[e]).collect();
                let obj: f64 = edges.iter().map(|&e| problem.weight(e)).sum();
                let better = match &best {
                    None => true,
                    Some((b, be)) => {
                        obj > b + BOUND_TOL
                            || (obj >= b - BOUND_TOL && canonical_cmp(problem, &edges, be) == Ordering::Less)
                    }
                };
                if better {
                    best = Some((obj, edges));
                }
            }
            continue;
        };
        for value in [true, false] {
            let mut fixed = node.fixed.clone();
            fixed[branch] = Some(value);
            if let Some((bound, x)) = relax(problem, &rows, &fixed) {
                if best.as_ref().is_none_or(|(inc, _)| bound > inc + BOUND_TOL) {
                    seq += 1;
                    heap.push(Node { bound, seq, fixed, x });
                }
            }
        }
    }
    let (_, edges) = best.ok_or_else(|| Error::invalid("no connected circuit meets the constraints"))?;
    let mut notes = vec![format!("branch-and-bound nodes: {explored}")];
    if short {
        notes.push("positive pool smaller than the requested share".into());
    }
    finish(problem, edges, notes)
}
