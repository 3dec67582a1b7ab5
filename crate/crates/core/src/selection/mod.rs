// SPDX-License-Identifier: MIT OR Apache-2.0

//! Turning edge scores into circuits under an edge budget.
//!
//! Greedy rules ([`select_topk_abs`], [`select_pnr`]) rank edges directly.
//! [`select_ilp`] additionally requires every selected edge to be supported:
//! its source must have a selected incoming edge (unless it is the
//! embedding) and its target a selected outgoing edge (unless it is the
//! logits). [`brute_force_select`] solves the same problem by enumeration.

mod ilp;
mod simplex;

use std::cmp::Ordering;

use crate::attribution::AttributionScores;
use crate::error::{Error, Result};
use crate::graph::{budget_for, ranked_edges, Circuit, EdgeId, RankBy};

pub use ilp::{select_ilp, IlpConfig, DEFAULT_MAX_VARIABLES};

/// Largest graph [`brute_force_select`] enumerates.
pub const BRUTE_FORCE_MAX_EDGES: usize = 20;

/// Quantity summed over selected edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Absolute,
    Signed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    pub scores: AttributionScores,
    pub budget: usize,
    pub connected: bool,
    pub positive_ratio: Option<f64>,
    pub objective: Objective,
}

impl SelectionProblem {
    pub fn new(scores: AttributionScores, budget: usize) -> Result<Self> {
        let n = scores.graph().n_edges();
        if budget > n {
            return Err(Error::invalid(format!("budget {budget} exceeds the {n} edges of the graph")));
        }
        Ok(Self {
            scores,
            budget,
            connected: false,
            positive_ratio: None,
            objective: Objective::Absolute,
        })
    }

    /// Budget `floor(k * |E|)` for an edge fraction `k` in `[0, 1]`.
    pub fn with_fraction(scores: AttributionScores, k: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::invalid(format!("edge fraction {k} outside [0, 1]")));
        }
        let b = budget_for(k, scores.graph().n_edges());
        Self::new(scores, b)
    }

    pub fn connected(mut self, on: bool) -> Self {
        self.connected = on;
        self
    }

    pub fn positive_ratio(mut self, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("positive ratio {rho} outside [0, 1]")));
        }
        self.positive_ratio = Some(rho);
        Ok(self)
    }

    pub fn objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub(crate) fn weight(&self, e: EdgeId) -> f64 {
        let s = self.scores.get(e);
        match self.objective {
            Objective::Absolute => s.abs(),
            Objective::Signed => s,
        }
    }

    /// Edges with a strictly positive score.
    pub(crate) fn positive_pool(&self) -> Vec<EdgeId> {
        (0..self.scores.values().len()).filter(|&e| self.scores.get(e) > 0.0).collect()
    }

    /// Required number of positive edges: `round(rho * B)` half-up, capped
    /// at the positive pool, and whether the cap applied.
    pub(crate) fn positive_quota(&self) -> (usize, bool) {
        let Some(rho) = self.positive_ratio else { return (0, false) };
        let want = round_half_up(rho * self.budget as f64);
        let have = self.positive_pool().len();
        (want.min(have), want > have)
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub circuit: Circuit,
    /// Objective summed over the selected edges.
    pub objective: f64,
    pub notes: Vec<String>,
}

fn finish(problem: &SelectionProblem, edges: Vec<EdgeId>, notes: Vec<String>) -> Result<Selection> {
    let objective = edges.iter().map(|&e| problem.weight(e)).sum();
    Ok(Selection {
        circuit: Circuit::from_edges(problem.scores.graph().clone(), edges)?,
        objective,
        notes,
    })
}

/// The `B` edges of largest |score|, ties broken by ascending edge name.
pub fn select_topk_abs(problem: &SelectionProblem) -> Result<Selection> {
    let g = problem.scores.graph();
    let order = ranked_edges(g, problem.scores.values(), RankBy::Absolute);
    finish(problem, order[..problem.budget].to_vec(), Vec::new())
}

/// `round(rho * B)` edges from the positive pool by descending score, the
/// rest by descending |score| among the remaining edges.
pub fn select_pnr(problem: &SelectionProblem, rho: f64) -> Result<Selection> {
    let problem = problem.clone().positive_ratio(rho)?;
    let g = problem.scores.graph();
    let values = problem.scores.values();
    let (quota, short) = problem.positive_quota();
    let mut notes = Vec::new();
    if short {
        notes.push(format!(
            "positive pool holds {} edges, below round({rho} x {}); shortfall filled by |score|",
            problem.positive_pool().len(),
            problem.budget
        ));
    }
    let mut taken = vec![false; values.len()];
    let mut chosen = Vec::with_capacity(problem.budget);
    for e in ranked_edges(g, values, RankBy::Signed).into_iter().take(quota) {
        taken[e] = true;
        chosen.push(e);
    }
    for e in ranked_edges(g, values, RankBy::Absolute) {
        if chosen.len() == problem.budget {
            break;
        }
        if !taken[e] {
            taken[e] = true;
            chosen.push(e);
        }
    }
    finish(&problem, chosen, notes)
}

/// True when every edge of `member` is supported on both ends.
pub(crate) fn is_connected(problem: &SelectionProblem, member: &[bool]) -> bool {
    let g = problem.scores.graph();
    (0..member.len()).filter(|&e| member[e]).all(|e| {
        let edge = g.edge(e);
        (edge.src == g.embedding() || g.incoming(edge.src).iter().any(|&f| member[f]))
            && (edge.dst == g.logits() || g.outgoing(edge.dst).iter().any(|&f| member[f]))
    })
}

/// Error for budgets that admit only the empty circuit.
pub(crate) fn check_reachable(problem: &SelectionProblem) -> Result<()> {
    if !problem.connected || problem.budget == 0 {
        return Ok(());
    }
    let min = problem
        .scores
        .graph()
        .shortest_path_len()
        .ok_or_else(|| Error::invalid("graph has no embedding-to-logits path"))?;
    if problem.budget < min {
        return Err(Error::Infeasible {
            budget: problem.budget,
            min_feasible: min,
        });
    }
    Ok(())
}

/// Canonical comparison of two edge sets of equal objective: fewer edges,
/// then lexicographically smaller sorted edge names.
pub(crate) fn canonical_cmp(problem: &SelectionProblem, a: &[EdgeId], b: &[EdgeId]) -> Ordering {
    let g = problem.scores.graph();
    let names = |s: &[EdgeId]| {
        let mut v: Vec<&str> = s.iter().map(|&e| g.edge_name(e)).collect();
        v.sort_unstable();
        v
    };
    a.len().cmp(&b.len()).then_with(|| names(a).cmp(&names(b)))
}

/// Exhaustive search over every subset of at most `B` edges.
pub fn brute_force_select(problem: &SelectionProblem) -> Result<Selection> {
    let n = problem.scores.graph().n_edges();
    if n > BRUTE_FORCE_MAX_EDGES {
        return Err(Error::Budget(format!(
            "brute force limited to {BRUTE_FORCE_MAX_EDGES} edges, graph has {n}"
        )));
    }
    check_reachable(problem)?;
    let (quota, _) = problem.positive_quota();
    let positive: Vec<bool> = (0..n).map(|e| problem.scores.get(e) > 0.0).collect();
    let mut best: Option<(f64, Vec<EdgeId>)> = None;
    let mut member = vec![false; n];
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize > problem.budget {
            continue;
        }
        let edges: Vec<EdgeId> = (0..n).filter(|&e| mask >> e & 1 == 1).collect();
        if edges.iter().filter(|&&e| positive[e]).count() < quota {
            continue;
        }
        if problem.connected {
            member.iter_mut().enumerate().for_each(|(e, m)| *m = mask >> e & 1 == 1);
            if !is_connected(problem, &member) {
                continue;
            }
        }
        let obj: f64 = edges.iter().map(|&e| problem.weight(e)).sum();
        let better = match &best {
            None => true,
            Some((b, be)) => obj > *b || (obj == *b && canonical_cmp(problem, &edges, be) == Ordering::Less),
        };
        if better {
            best = Some((obj, edges));
        }
    }
    let (_, edges) = best.ok_or_else(|| Error::invalid("no subset satisfies the positive-ratio constraint"))?;
    finish(problem, edges, Vec::new())
}
