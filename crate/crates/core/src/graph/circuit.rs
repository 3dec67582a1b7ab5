// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{ComputationGraph, EdgeId, NodeId};
use crate::attribution::AttributionScores;
use crate::error::{Error, Result};

/// Maximum proportions of edges kept per circuit in the standard sweep.
pub const DEFAULT_GRID: [f64; 9] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub enum CircuitRepr {
    Membership(Vec<bool>),
    Scores(Vec<f64>),
}

/// A subgraph, given either as per-edge membership or as per-edge importance.
///
/// Optional neuron subsets restrict which coordinates of a node's output are
/// part of the circuit; a node without a subset contributes all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    graph: Arc<ComputationGraph>,
    repr: CircuitRepr,
    neurons: BTreeMap<NodeId, BTreeSet<usize>>,
}

impl Circuit {
    pub fn empty(graph: Arc<ComputationGraph>) -> Self {
        let n = graph.n_edges();
        Self::from_membership(graph, vec![false; n]).expect("sized")
    }

    pub fn full(graph: Arc<ComputationGraph>) -> Self {
        let n = graph.n_edges();
        Self::from_membership(graph, vec![true; n]).expect("sized")
    }

    pub fn from_membership(graph: Arc<ComputationGraph>, member: Vec<bool>) -> Result<Self> {
        if member.len() != graph.n_edges() {
            return Err(Error::invalid(format!(
                "membership has {} entries for {} edges",
                member.len(),
                graph.n_edges()
            )));
        }
        Ok(Self {
            graph,
            repr: CircuitRepr::Membership(member),
            neurons: BTreeMap::new(),
        })
    }

    pub fn from_edges(graph: Arc<ComputationGraph>, edges: impl IntoIterator<Item = EdgeId>) -> Result<Self> {
        let mut member = vec![false; graph.n_edges()];
        for e in edges {
            *member
                .get_mut(e)
                .ok_or_else(|| Error::UnknownEdge(format!("edge id {e}")))? = true;
        }
        Self::from_membership(graph, member)
    }

    pub fn from_scores(graph: Arc<ComputationGraph>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != graph.n_edges() {
            return Err(Error::invalid("score vector does not match edge count"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "circuit scores" });
        }
        Ok(Self {
            graph,
            repr: CircuitRepr::Scores(scores),
            neurons: BTreeMap::new(),
        })
    }

    /// Restricts `node` to a subset of its output coordinates.
    pub fn with_neurons(mut self, node: NodeId, subset: BTreeSet<usize>) -> Result<Self> {
        let d = self.graph.d_model();
        if let Some(&bad) = subset.iter().find(|&&i| i >= d) {
            return Err(Error::invalid(format!("neuron index {bad} exceeds d_model {d}")));
        }
        let member = self
            .membership()
            .ok_or_else(|| Error::invalid("neuron subsets need a membership circuit"))?;
        if !self.graph.outgoing(node).iter().any(|&e| member[e]) {
            return Err(Error::invalid(format!(
                "node {} has no member outgoing edge",
                self.graph.node(node)
            )));
        }
        self.neurons.insert(node, subset);
        Ok(self)
    }

    pub fn graph(&self) -> &Arc<ComputationGraph> {
        &self.graph
    }

    pub fn repr(&self) -> &CircuitRepr {
        &self.repr
    }

    pub fn membership(&self) -> Option<&[bool]> {
        match &self.repr {
            CircuitRepr::Membership(m) => Some(m),
            CircuitRepr::Scores(_) => None,
        }
    }

    pub fn scores(&self) -> Option<&[f64]> {
        match &self.repr {
            CircuitRepr::Scores(s) => Some(s),
            CircuitRepr::Membership(_) => None,
        }
    }

    pub fn neurons(&self) -> &BTreeMap<NodeId, BTreeSet<usize>> {
        &self.neurons
    }

    pub fn contains(&self, e: EdgeId) -> bool {
        self.membership().is_some_and(|m| m[e])
    }

    pub fn member_edges(&self) -> Vec<EdgeId> {
        self.membership()
            .map(|m| (0..m.len()).filter(|&e| m[e]).collect())
            .unwrap_or_default()
    }

    /// Sum over member edges of the fraction of the source node's neurons kept.
    pub fn weighted_edge_count(&self) -> Result<f64> {
        let member = self
            .membership()
            .ok_or_else(|| Error::invalid("weighted edge count needs a membership circuit"))?;
        let d = self.graph.d_model();
        let mut total = 0.0;
        for (e, &m) in member.iter().enumerate() {
            if !m {
                continue;
            }
            let src = self.graph.edge(e).src;
            total += match self.neurons.get(&src) {
                Some(subset) => {
                    if let Some(&bad) = subset.iter().find(|&&i| i >= d) {
                        return Err(Error::invalid(format!("neuron index {bad} exceeds d_model {d}")));
                    }
                    subset.len() as f64 / d as f64
                }
                None => 1.0,
            };
        }
        Ok(total)
    }

    /// Weighted edge count normalized by the number of possible edges.
    pub fn edge_percentage(&self) -> Result<f64> {
        let n = self.graph.n_edges();
        if n == 0 {
            return Err(Error::invalid("graph has no edges"));
        }
        Ok(self.weighted_edge_count()? / n as f64)
    }
}

/// Ranking key for top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankBy {
    #[default]
    Absolute,
    Signed,
}

/// Nested circuits, one per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSeries {
    pub entries: Vec<(f64, Circuit)>,
}

impl CircuitSeries {
    pub fn grid(&self) -> Vec<f64> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }

    /// Same circuit at every threshold of `grid`.
    pub fn constant(grid: &[f64], circuit: &Circuit) -> Self {
        Self {
            entries: grid.iter().map(|&k| (k, circuit.clone())).collect(),
        }
    }
}

/// Edges ordered by decreasing importance, ties broken by ascending edge name.
pub(crate) fn ranked_edges(graph: &ComputationGraph, scores: &[f64], rank: RankBy) -> Vec<EdgeId> {
    let key = |e: EdgeId| match rank {
        RankBy::Absolute => scores[e].abs(),
        RankBy::Signed => scores[e],
    };
    let mut order = graph.edges_by_name();
    // stable sort keeps name order among equal keys
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    order
}

/// Number of edges allowed at threshold `k`.
pub(crate) fn budget_for(k: f64, n_edges: usize) -> usize {
    // tolerate representation error just below an integer
    ((k * n_edges as f64) + 1e-9).floor() as usize
}

/// Top-`floor(k * |E|)` circuits for every `k` in `grid`.
pub fn circuits_from_scores(scores: &AttributionScores, grid: &[f64], rank: RankBy) -> Result<CircuitSeries> {
    let graph = scores.graph().clone();
    if graph.n_edges() == 0 || scores.values().is_empty() {
        return Err(Error::invalid("empty score map"));
    }
    if let Some(k) = grid.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(Error::invalid(format!("threshold {k} outside (0, 1]")));
    }
    let order = ranked_edges(&graph, scores.values(), rank);
    let mut entries = Vec::with_capacity(grid.len());
    for &k in grid {
        let b = budget_for(k, graph.n_edges()).min(graph.n_edges());
        entries.push((k, Circuit::from_edges(graph.clone(), order[..b].iter().copied())?));
    }
    Ok(CircuitSeries { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Provenance;
    use proptest::prelude::*;

    fn graph() -> Arc<ComputationGraph> {
        Arc::new(ComputationGraph::transformer(2, 2, 8))
    }

    #[test]
    fn full_circuit_counts_every_edge() {
        let g = graph();
        let c = Circuit::full(g.clone());
        assert_eq!(c.weighted_edge_count().unwrap(), g.n_edges() as f64);
        assert_eq!(c.edge_percentage().unwrap(), 1.0);
        assert_eq!(Circuit::empty(g).weighted_edge_count().unwrap(), 0.0);
    }

    #[test]
    fn half_neurons_weigh_half() {
        let g = graph();
        let c = Circuit::from_edges(g.clone(), [0]).unwrap();
        let src = g.edge(0).src;
        let c = c.with_neurons(src, (0..4).collect()).unwrap();
        assert_eq!(c.weighted_edge_count().unwrap(), 0.5);
    }

    #[test]
    fn neuron_subset_validation() {
        let g = graph();
        let c = Circuit::from_edges(g.clone(), [0]).unwrap();
        assert!(c.clone().with_neurons(0, [8].into_iter().collect()).is_err());
        let idle = g.edge(g.n_edges() - 1).src;
        assert!(c.with_neurons(idle, [0].into_iter().collect()).is_err());
    }

    #[test]
    fn half_the_edges_is_half() {
        let g = graph();
        let n = g.n_edges();
        let c = Circuit::from_edges(g, 0..n / 2).unwrap();
        assert_eq!(c.edge_percentage().unwrap(), (n / 2) as f64 / n as f64);
    }

    #[test]
    fn default_grid_gives_nine_circuits() {
        let g = graph();
        let s = AttributionScores::new(g.clone(), (0..g.n_edges()).map(|i| i as f64).collect(), Provenance::named("t")).unwrap();
        let series = circuits_from_scores(&s, &DEFAULT_GRID, RankBy::Absolute).unwrap();
        assert_eq!(series.entries.len(), 9);
        let full = circuits_from_scores(&s, &[1.0], RankBy::Absolute).unwrap();
        assert_eq!(full.entries[0].1, Circuit::full(g));
    }

    #[test]
    fn bad_threshold_rejected() {
        let g = graph();
        let s = AttributionScores::zeros(g, Provenance::named("t"));
        assert!(circuits_from_scores(&s, &[0.0], RankBy::Absolute).is_err());
        assert!(circuits_from_scores(&s, &[1.5], RankBy::Absolute).is_err());
    }

    #[test]
    fn ties_break_by_name() {
        let g = graph();
        let s = AttributionScores::new(g.clone(), vec![1.0; g.n_edges()], Provenance::named("t")).unwrap();
        let series = circuits_from_scores(&s, &[0.1], RankBy::Absolute).unwrap();
        let chosen = series.entries[0].1.member_edges();
        let mut by_name = g.edges_by_name();
        by_name.truncate(chosen.len());
        by_name.sort();
        assert_eq!(chosen, by_name);
    }

    proptest! {
        #[test]
        fn percentage_never_exceeds_one(bits in proptest::collection::vec(any::<bool>(), 24), sub in 0usize..8) {
            let g = graph();
            let n = g.n_edges();
            let member: Vec<bool> = (0..n).map(|i| bits[i % bits.len()]).collect();
            let mut c = Circuit::from_membership(g.clone(), member.clone()).unwrap();
            prop_assert!(c.edge_percentage().unwrap() <= 1.0);
            // full subsets on every eligible node leave the count unchanged
            let plain = c.weighted_edge_count().unwrap();
            for node in 0..g.n_nodes() {
                if g.outgoing(node).iter().any(|&e| member[e]) {
                    c = c.with_neurons(node, (0..8).collect()).unwrap();
                }
            }
            prop_assert_eq!(c.weighted_edge_count().unwrap(), plain);
            prop_assert_eq!(plain, member.iter().filter(|&&m| m).count() as f64);
            if let Some(e) = (0..n).find(|&e| member[e]) {
                let src = g.edge(e).src;
                let c2 = c.clone().with_neurons(src, (0..sub).collect()).unwrap();
                prop_assert!(c2.edge_percentage().unwrap() <= 1.0);
            }
        }

        #[test]
        fn series_is_nested_and_within_budget(scores in proptest::collection::vec(-5.0f64..5.0, 1..200)) {
            let g = graph();
            let vals: Vec<f64> = (0..g.n_edges()).map(|i| scores[i % scores.len()]).collect();
            let s = AttributionScores::new(g.clone(), vals.clone(), Provenance::named("t")).unwrap();
            let series = circuits_from_scores(&s, &DEFAULT_GRID, RankBy::Absolute).unwrap();
            for w in series.entries.windows(2) {
                for e in w[0].1.member_edges() {
                    prop_assert!(w[1].1.contains(e));
                }
            }
            for (k, c) in &series.entries {
                prop_assert!(c.edge_percentage().unwrap() <= *k + 1e-12);
            }
            // permuting the order in which scores are supplied changes nothing
            let mut rev: Vec<(usize, f64)> = vals.iter().copied().enumerate().collect();
            rev.reverse();
            let mut permuted = vec![0.0; vals.len()];
            for (i, v) in rev { permuted[i] = v; }
            let s2 = AttributionScores::new(g, permuted, Provenance::named("t")).unwrap();
            prop_assert_eq!(circuits_from_scores(&s2, &DEFAULT_GRID, RankBy::Absolute).unwrap(), series);
        }
    }
}
