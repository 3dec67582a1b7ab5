// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActivationCache, Hooks, TransformerModel};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::EdgeId;
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    #[default]
    Counterfactual,
    Mean,
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Counterfactual => "cf",
            AblationKind::Mean => "mean",
        })
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cf" | "counterfactual" => Ok(AblationKind::Counterfactual),
            "mean" => Ok(AblationKind::Mean),
            other => Err(Error::invalid(format!("unknown ablation kind {other:?} (expected cf or mean)"))),
        }
    }
}

/// Where replacement contributions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationSpec {
    /// Contributions from the forward pass on each instance's counterfactual.
    Counterfactual,
    /// Position-resolved mean contribution of every node over a reference dataset.
    Mean { means: Vec<Tensor> },
}

impl AblationSpec {
    pub fn kind(&self) -> AblationKind {
        match self {
            AblationSpec::Counterfactual => AblationKind::Counterfactual,
            AblationSpec::Mean { .. } => AblationKind::Mean,
        }
    }

    /// Mean contributions over `reference`, which must share one sequence length.
    pub fn mean_over(model: &TransformerModel, reference: &[TaskInstance]) -> Result<Self> {
        let first = reference
            .first()
            .ok_or_else(|| Error::invalid("mean ablation needs a non-empty reference set"))?;
        let t = first.tokens.len();
        let mut acc: Option<Vec<Tensor>> = None;
        for inst in reference {
            if inst.tokens.len() != t {
                return Err(Error::invalid("mean ablation needs equal-length prompts"));
            }
            let (_, cache) = model.forward_with_cache(&inst.tokens)?;
            match &mut acc {
                None => acc = Some(cache.outputs),
                Some(a) => {
                    for (s, o) in a.iter_mut().zip(&cache.outputs) {
                        for (x, y) in s.data_mut().iter_mut().zip(o.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let n = reference.len() as f64;
        let mut means = acc.expect("non-empty");
        for m in &mut means {
            m.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(AblationSpec::Mean { means })
    }

    /// Replacement node outputs for `inst`, indexed by node id.
    pub fn source(&self, model: &TransformerModel, inst: &TaskInstance) -> Result<Vec<Tensor>> {
        match self {
            AblationSpec::Counterfactual => Ok(model.forward_with_cache(&inst.cf_tokens)?.1.outputs),
            AblationSpec::Mean { means } => {
                if means.first().map(Tensor::rows) != Some(inst.tokens.len()) {
                    return Err(Error::invalid("mean ablation computed for another prompt length"));
                }
                Ok(means.clone())
            }
        }
    }
}

/// Replacement contributions for individual (edge, position) pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchPlan {
    kind: AblationKind,
    patches: BTreeMap<(EdgeId, usize), Vec<f64>>,
}

impl PatchPlan {
    pub fn new(kind: AblationKind) -> Self {
        Self {
            kind,
            patches: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> AblationKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn insert(&mut self, edge: EdgeId, pos: usize, value: Vec<f64>) -> &mut Self {
        self.patches.insert((edge, pos), value);
        self
    }

    /// Patches `edges` at every position with the source node's row from `source`.
    pub fn from_source(
        model: &TransformerModel,
        kind: AblationKind,
        edges: impl IntoIterator<Item = EdgeId>,
        source: &[Tensor],
    ) -> Result<Self> {
        let g = model.graph();
        let mut plan = Self::new(kind);
        for e in edges {
            if e >= g.n_edges() {
                return Err(Error::UnknownEdge(format!("edge id {e}")));
            }
            let z = &source[g.edge(e).src];
            for t in 0..z.rows() {
                plan.insert(e, t, z.row(t).to_vec());
            }
        }
        Ok(plan)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(EdgeId, usize), &Vec<f64>)> {
        self.patches.iter()
    }
}

/// Per-edge row replacement.
#[derive(Debug, Clone)]
pub(crate) struct RowPatch {
    /// `[T, d]` replacement values; rows outside `rows` are ignored.
    pub values: Tensor,
    /// Patched rows; `None` means all of them.
    pub rows: Option<Vec<bool>>,
}

/// Hooks replacing edge contributions.
pub(crate) struct PatchHooks {
    pub per_edge: Vec<Option<RowPatch>>,
}

impl PatchHooks {
    /// Whole-sequence replacement of every edge where `patched[e]` is set.
    pub fn full(patched: &[bool], model: &TransformerModel, source: &[Tensor]) -> Self {
        let g = model.graph();
        Self {
            per_edge: (0..g.n_edges())
                .map(|e| {
                    patched[e].then(|| RowPatch {
                        values: source[g.edge(e).src].clone(),
                        rows: None,
                    })
                })
                .collect(),
        }
    }

    fn from_plan(model: &TransformerModel, plan: &PatchPlan, seq_len: usize) -> Result<Self> {
        let g = model.graph();
        let d = model.config().d_model;
        let mut per_edge: Vec<Option<RowPatch>> = vec![None; g.n_edges()];
        for (&(e, t), value) in plan.iter() {
            if e >= g.n_edges() {
                return Err(Error::UnknownEdge(format!("edge id {e}")));
            }
            if t >= seq_len {
                return Err(Error::invalid(format!("patch position {t} beyond sequence length {seq_len}")));
            }
            if value.len() != d {
                return Err(Error::shape("patch", format!("replacement of length {} for d_model {d}", value.len())));
            }
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "patch" });
            }
            let p = per_edge[e].get_or_insert_with(|| RowPatch {
                values: Tensor::zeros(&[seq_len, d]),
                rows: Some(vec![false; seq_len]),
            });
            p.values.row_mut(t).copy_from_slice(value);
            p.rows.as_mut().expect("partial")[t] = true;
        }
        Ok(Self { per_edge })
    }
}

impl Hooks for PatchHooks {
    fn edge_input(&self, tape: &mut Tape, edge: EdgeId, upstream: Var) -> Result<Var> {
        let Some(p) = &self.per_edge[edge] else {
            return Ok(upstream);
        };
        let up = tape.value(upstream);
        if up.shape() != p.values.shape() {
            return Err(Error::shape("patch", format!("{:?} vs {:?}", up.shape(), p.values.shape())));
        }
        let Some(rows) = &p.rows else {
            return tape.constant(p.values.clone());
        };
        if !tape.requires_grad(upstream) {
            let mut v = up.clone();
            for (t, &r) in rows.iter().enumerate() {
                if r {
                    v.row_mut(t).copy_from_slice(p.values.row(t));
                }
            }
            return tape.constant(v);
        }
        // differentiable blend: kept rows pass through, patched rows take the replacement
        let mut keep = Tensor::zeros(up.shape());
        let mut repl = Tensor::zeros(up.shape());
        for (t, &r) in rows.iter().enumerate() {
            if r {
                repl.row_mut(t).copy_from_slice(p.values.row(t));
            } else {
                keep.row_mut(t).iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let keep = tape.constant(keep)?;
        let repl = tape.constant(repl)?;
        let kept = tape.mul(upstream, keep)?;
        tape.add(kept, repl)
    }
}

impl TransformerModel {
    /// Forward pass where each planned (edge, position) receives its replacement.
    pub fn forward_with_patches(&self, tokens: &[usize], plan: &PatchPlan) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let hooks = PatchHooks::from_plan(self, plan, tokens.len())?;
        self.forward_hooked(tokens, &hooks)
    }

    /// Like [`forward_with_patches`](Self::forward_with_patches), also returning the patched cache.
    pub fn forward_with_patches_cache(&self, tokens: &[usize], plan: &PatchPlan) -> Result<(Tensor, ActivationCache)> {
        self.check_tokens(tokens)?;
        let hooks = PatchHooks::from_plan(self, plan, tokens.len())?;
        self.forward_hooked_cache(tokens, &hooks)
    }

    /// Forward pass with arbitrary hooks, returning the logits.
    pub fn forward_hooked(&self, tokens: &[usize], hooks: &dyn Hooks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let wv = self.weights().to_tape(&mut tape, false)?;
        let out = self.run(&mut tape, &wv, tokens, hooks)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Logits with every edge where `patched[e]` is set replaced from `source` at all positions.
    pub fn forward_with_edge_mask(&self, tokens: &[usize], patched: &[bool], source: &[Tensor]) -> Result<Tensor> {
        if patched.len() != self.graph().n_edges() {
            return Err(Error::invalid("edge mask does not match the graph"));
        }
        let hooks = PatchHooks::full(patched, self, source);
        self.forward_hooked(tokens, &hooks)
    }
}
