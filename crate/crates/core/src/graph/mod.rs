// SPDX-License-Identifier: MIT OR Apache-2.0

//! Computation graphs, circuits, the weighted edge count, threshold sweeps and
//! the on-disk circuit formats.
//!
//! Nodes are the input embedding, one node per attention head, one MLP node
//! per layer and the logits node. An edge `(u, v)` exists for every writer `u`
//! whose output reaches reader `v` through the residual stream.

mod circuit;
mod files;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use circuit::{
    circuits_from_scores, Circuit, CircuitRepr, CircuitSeries, RankBy, DEFAULT_GRID,
};
pub(crate) use circuit::{budget_for, ranked_edges};
pub use files::{
    parse_circuit, read_submission, serialize_circuit, serialize_scores, CircuitMeta,
    write_boolean_submission, write_score_submission, Submission, CIRCUIT_FORMAT,
};

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Embedding,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Embedding => write!(f, "embed.0.0"),
            NodeKind::Head { layer, head } => write!(f, "head.{layer}.{head}"),
            NodeKind::Mlp { layer } => write!(f, "mlp.{layer}.0"),
            NodeKind::Logits => write!(f, "logits.0.0"),
        }
    }
}

impl NodeKind {
    /// Parses the `kind.layer.index` form produced by `Display`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut it = s.split('.');
        let kind = it.next()?;
        let layer: usize = it.next()?.parse().ok()?;
        let index: usize = it.next()?.parse().ok()?;
        if it.next().is_some() {
            return None;
        }
        match kind {
            "embed" if layer == 0 && index == 0 => Some(NodeKind::Embedding),
            "head" => Some(NodeKind::Head { layer, head: index }),
            "mlp" if index == 0 => Some(NodeKind::Mlp { layer }),
            "logits" if layer == 0 && index == 0 => Some(NodeKind::Logits),
            _ => None,
        }
    }

    pub fn is_writer(&self) -> bool {
        !matches!(self, NodeKind::Logits)
    }

    pub fn is_reader(&self) -> bool {
        !matches!(self, NodeKind::Embedding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

/// Directed acyclic graph of model components.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    nodes: Vec<NodeKind>,
    edges: Vec<Edge>,
    d_model: usize,
    incoming: Vec<Vec<EdgeId>>,
    outgoing: Vec<Vec<EdgeId>>,
    edge_names: Vec<String>,
    by_name: HashMap<String, EdgeId>,
    node_index: HashMap<NodeKind, NodeId>,
}

impl ComputationGraph {
    /// Graph of a pre-norm transformer: heads of layer `l` read the embedding and
    /// every head/MLP of earlier layers; MLP `l` additionally reads the heads of
    /// layer `l`; logits read everything.
    pub fn transformer(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        let mut nodes = vec![NodeKind::Embedding];
        for layer in 0..n_layers {
            for head in 0..n_heads {
                nodes.push(NodeKind::Head { layer, head });
            }
            nodes.push(NodeKind::Mlp { layer });
        }
        nodes.push(NodeKind::Logits);
        let mut edges = Vec::new();
        for (dst, kind) in nodes.iter().enumerate() {
            let upstream: Vec<NodeId> = match kind {
                NodeKind::Embedding => continue,
                NodeKind::Head { layer, .. } => (0..dst)
                    .filter(|&u| match nodes[u] {
                        NodeKind::Embedding => true,
                        NodeKind::Head { layer: l, .. } | NodeKind::Mlp { layer: l } => l < *layer,
                        NodeKind::Logits => false,
                    })
                    .collect(),
                NodeKind::Mlp { layer } => (0..dst)
                    .filter(|&u| match nodes[u] {
                        NodeKind::Embedding => true,
                        NodeKind::Head { layer: l, .. } => l <= *layer,
                        NodeKind::Mlp { layer: l } => l < *layer,
                        NodeKind::Logits => false,
                    })
                    .collect(),
                NodeKind::Logits => (0..dst).collect(),
            };
            edges.extend(upstream.into_iter().map(|src| Edge { src, dst }));
        }
        Self::build(nodes, edges, d_model).expect("transformer wiring is valid")
    }

    /// Arbitrary graph; node order must be topological (`src < dst` for every edge),
    /// with the embedding first and the logits last.
    pub fn custom(nodes: Vec<NodeKind>, edges: Vec<Edge>, d_model: usize) -> Result<Self> {
        Self::build(nodes, edges, d_model)
    }

    fn build(nodes: Vec<NodeKind>, edges: Vec<Edge>, d_model: usize) -> Result<Self> {
        if nodes.first() != Some(&NodeKind::Embedding) || nodes.last() != Some(&NodeKind::Logits) {
            return Err(Error::invalid("graph must start with the embedding and end with logits"));
        }
        let mut node_index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(*n, i).is_some() {
                return Err(Error::invalid(format!("duplicate node {n}")));
            }
        }
        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut outgoing = vec![Vec::new(); nodes.len()];
        let mut edge_names = Vec::with_capacity(edges.len());
        let mut by_name = HashMap::new();
        for (id, e) in edges.iter().enumerate() {
            if e.src >= e.dst || e.dst >= nodes.len() {
                return Err(Error::invalid(format!("edge {}->{} breaks topological order", e.src, e.dst)));
            }
            let name = format!("{}->{}", nodes[e.src], nodes[e.dst]);
            if by_name.insert(name.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate edge {name}")));
            }
            edge_names.push(name);
            incoming[e.dst].push(id);
            outgoing[e.src].push(id);
        }
        Ok(Self {
            nodes,
            edges,
            d_model,
            incoming,
            outgoing,
            edge_names,
            by_name,
            node_index,
        })
    }

    pub fn nodes(&self) -> &[NodeKind] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn node(&self, id: NodeId) -> NodeKind {
        self.nodes[id]
    }

    pub fn node_id(&self, kind: NodeKind) -> Option<NodeId> {
        self.node_index.get(&kind).copied()
    }

    pub fn embedding(&self) -> NodeId {
        0
    }

    pub fn logits(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn edge(&self, id: EdgeId) -> Edge {
        self.edges[id]
    }

    pub fn incoming(&self, node: NodeId) -> &[EdgeId] {
        &self.incoming[node]
    }

    pub fn outgoing(&self, node: NodeId) -> &[EdgeId] {
        &self.outgoing[node]
    }

    /// Canonical `src->dst` name.
    pub fn edge_name(&self, id: EdgeId) -> &str {
        &self.edge_names[id]
    }

    pub fn edge_by_name(&self, name: &str) -> Option<EdgeId> {
        self.by_name.get(name).copied()
    }

    pub fn find_edge(&self, src: NodeKind, dst: NodeKind) -> Option<EdgeId> {
        self.edge_by_name(&format!("{src}->{dst}"))
    }

    /// Edge ids sorted by canonical name.
    pub fn edges_by_name(&self) -> Vec<EdgeId> {
        let mut ids: Vec<EdgeId> = (0..self.edges.len()).collect();
        ids.sort_by(|&a, &b| self.edge_names[a].cmp(&self.edge_names[b]));
        ids
    }

    /// Fewest edges on any embedding-to-logits path, if one exists.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.nodes.len()];
        dist[0] = 0;
        for v in 0..self.nodes.len() {
            if dist[v] == usize::MAX {
                continue;
            }
            for &e in &self.outgoing[v] {
                let w = self.edges[e].dst;
                dist[w] = dist[w].min(dist[v] + 1);
            }
        }
        let d = dist[self.logits()];
        (d != usize::MAX).then_some(d)
    }

    /// Every embedding-to-logits path as an edge sequence, up to `limit` paths.
    pub fn enumerate_paths(&self, limit: usize) -> Result<Vec<Vec<EdgeId>>> {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        self.paths_from(self.embedding(), &mut stack, &mut out, limit)?;
        Ok(out)
    }

    fn paths_from(
        &self,
        node: NodeId,
        stack: &mut Vec<EdgeId>,
        out: &mut Vec<Vec<EdgeId>>,
        limit: usize,
    ) -> Result<()> {
        if node == self.logits() {
            if out.len() >= limit {
                return Err(Error::Budget(format!("more than {limit} paths")));
            }
            out.push(stack.clone());
            return Ok(());
        }
        for &e in &self.outgoing[node] {
            stack.push(e);
            self.paths_from(self.edges[e].dst, stack, out, limit)?;
            stack.pop();
        }
        Ok(())
    }
}

/// Closed-form edge count of [`ComputationGraph::transformer`].
pub fn transformer_edge_count(n_layers: usize, n_heads: usize) -> usize {
    let per_layer_writers = n_heads + 1;
    let mut total = 0;
    for l in 0..n_layers {
        let upstream = 1 + per_layer_writers * l;
        total += n_heads * upstream; // heads
        total += upstream + n_heads; // mlp
    }
    total + 1 + per_layer_writers * n_layers // logits
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_count_matches_closed_form() {
        for l in 0..4 {
            for h in 1..5 {
                let g = ComputationGraph::transformer(l, h, 8);
                assert_eq!(g.n_edges(), transformer_edge_count(l, h), "L={l} H={h}");
            }
        }
    }

    #[test]
    fn structural_invariants() {
        let g = ComputationGraph::transformer(2, 3, 12);
        assert!(g.incoming(g.embedding()).is_empty());
        assert!(g.outgoing(g.logits()).is_empty());
        for e in g.edges() {
            assert!(e.src < e.dst);
        }
        // mlp reads heads of its own layer, heads do not read the mlp of the same layer
        let h = g.node_id(NodeKind::Head { layer: 1, head: 0 }).unwrap();
        let m0 = g.node_id(NodeKind::Mlp { layer: 0 }).unwrap();
        let m1 = g.node_id(NodeKind::Mlp { layer: 1 }).unwrap();
        assert!(g.find_edge(NodeKind::Mlp { layer: 0 }, NodeKind::Head { layer: 1, head: 0 }).is_some());
        assert!(g.find_edge(NodeKind::Head { layer: 1, head: 0 }, NodeKind::Mlp { layer: 1 }).is_some());
        assert!(g.find_edge(NodeKind::Mlp { layer: 1 }, NodeKind::Head { layer: 1, head: 0 }).is_none());
        assert!(h < m1 && m0 < h);
    }

    #[test]
    fn names_round_trip() {
        let g = ComputationGraph::transformer(2, 2, 4);
        for id in 0..g.n_edges() {
            assert_eq!(g.edge_by_name(g.edge_name(id)), Some(id));
        }
        for n in g.nodes() {
            assert_eq!(NodeKind::parse(&n.to_string()), Some(*n));
        }
        assert_eq!(g.edge_name(0), "embed.0.0->head.0.0");
    }

    #[test]
    fn path_enumeration_one_layer() {
        // embed->logits, embed->h->logits (x2), embed->mlp->logits, embed->h->mlp->logits (x2)
        let g = ComputationGraph::transformer(1, 2, 4);
        assert_eq!(g.enumerate_paths(100).unwrap().len(), 6);
        assert_eq!(g.shortest_path_len(), Some(1));
        assert!(g.enumerate_paths(3).is_err());
    }

    #[test]
    fn custom_graph_rejects_cycles() {
        let nodes = vec![NodeKind::Embedding, NodeKind::Head { layer: 0, head: 0 }, NodeKind::Logits];
        assert!(ComputationGraph::custom(nodes.clone(), vec![Edge { src: 2, dst: 1 }], 4).is_err());
        assert!(ComputationGraph::custom(nodes, vec![Edge { src: 0, dst: 1 }, Edge { src: 1, dst: 2 }], 4).is_ok());
    }
}
