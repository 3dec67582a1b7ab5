// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Circuit, ComputationGraph, EdgeId, NodeId};

/// Where a score set came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<String>,
    /// Hex fingerprint of the scored instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Edges zeroed by bootstrap filtering.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filtered: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn named(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            ..Self::default()
        }
    }
}

/// Signed score per edge of a graph, indexed by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionScores {
    graph: Arc<ComputationGraph>,
    values: Vec<f64>,
    provenance: Provenance,
}

impl AttributionScores {
    pub fn new(graph: Arc<ComputationGraph>, values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if values.len() != graph.n_edges() {
            return Err(Error::invalid(format!(
                "{} scores for {} edges",
                values.len(),
                graph.n_edges()
            )));
        }
        if let Some(e) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite score on edge {}", graph.edge_name(e))));
        }
        Ok(Self {
            graph,
            values,
            provenance,
        })
    }

    pub fn zeros(graph: Arc<ComputationGraph>, provenance: Provenance) -> Self {
        let n = graph.n_edges();
        Self {
            graph,
            values: vec![0.0; n],
            provenance,
        }
    }

    pub fn graph(&self) -> &Arc<ComputationGraph> {
        &self.graph
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, e: EdgeId) -> f64 {
        self.values[e]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn provenance_mut(&mut self) -> &mut Provenance {
        &mut self.provenance
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Scores divided by their largest magnitude; an all-zero set stays zero.
    pub fn normalized(&self) -> Self {
        let m = self.max_abs();
        let values = if m > 0.0 {
            self.values.iter().map(|v| v / m).collect()
        } else {
            self.values.clone()
        };
        Self {
            graph: self.graph.clone(),
            values,
            provenance: self.provenance.clone(),
        }
    }
}

/// Signed score per node, indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScores {
    pub graph: Arc<ComputationGraph>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl NodeScores {
    /// Every edge takes the score of its source node.
    pub fn broadcast(&self) -> Result<AttributionScores> {
        let values = self.graph.edges().iter().map(|e| self.values[e.src]).collect();
        AttributionScores::new(self.graph.clone(), values, self.provenance.clone())
    }

    /// Circuit holding every outgoing edge of the given nodes.
    pub fn circuit(&self, nodes: &[NodeId]) -> Result<Circuit> {
        let edges = nodes.iter().flat_map(|&n| self.graph.outgoing(n).iter().copied());
        Circuit::from_edges(self.graph.clone(), edges)
    }
}
