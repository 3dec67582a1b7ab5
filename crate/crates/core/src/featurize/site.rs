// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{NodeId, NodeKind};
use crate::model::{ActivationCache, Hooks, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SiteComponent {
    /// Residual stream read by layer `layer`: the embedding plus every head
    /// and MLP of earlier layers. `layer == n_layers` is the final residual.
    Residual,
    /// Output of one attention head of layer `layer`.
    HeadOutput { head: usize },
}

/// Token position of a site, fixed or computed per instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum PositionSelector {
    Fixed { index: usize },
    Last,
    /// `offset` positions before the last one.
    FromEnd { offset: usize },
}

impl PositionSelector {
    pub fn resolve(&self, len: usize) -> Result<usize> {
        let p = match *self {
            PositionSelector::Fixed { index } => Some(index),
            PositionSelector::Last => len.checked_sub(1),
            PositionSelector::FromEnd { offset } => len.checked_sub(1 + offset),
        };
        p.filter(|&p| p < len)
            .ok_or_else(|| Error::invalid(format!("position {self:?} does not exist in a prompt of length {len}")))
    }

    pub fn is_rule(&self) -> bool {
        !matches!(self, PositionSelector::Fixed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSite {
    pub layer: usize,
    pub component: SiteComponent,
    pub position: PositionSelector,
}

impl InterventionSite {
    pub fn residual(layer: usize, position: PositionSelector) -> Self {
        Self {
            layer,
            component: SiteComponent::Residual,
            position,
        }
    }

    pub fn head(layer: usize, head: usize, position: PositionSelector) -> Self {
        Self {
            layer,
            component: SiteComponent::HeadOutput { head },
            position,
        }
    }

    pub fn validate(&self, model: &TransformerModel) -> Result<()> {
        let n_layers = model.config().n_layers;
        match self.component {
            SiteComponent::Residual if self.layer > n_layers => Err(Error::invalid(format!(
                "residual site before layer {} but the model has {n_layers} layers",
                self.layer
            ))),
            SiteComponent::HeadOutput { head } => self.head_node(model).map(|_| ()).ok_or_else(|| {
                Error::invalid(format!("the model has no head {head} in layer {}", self.layer))
            }),
            _ => Ok(()),
        }
    }

    fn head_node(&self, model: &TransformerModel) -> Option<NodeId> {
        match self.component {
            SiteComponent::HeadOutput { head } => model.graph().node_id(NodeKind::Head {
                layer: self.layer,
                head,
            }),
            SiteComponent::Residual => None,
        }
    }

    pub fn width(&self, model: &TransformerModel) -> usize {
        model.graph().d_model()
    }
}

impl std::fmt::Display for InterventionSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pos = match self.position {
            PositionSelector::Fixed { index } => index.to_string(),
            PositionSelector::Last => "last".into(),
            PositionSelector::FromEnd { offset } => format!("last-{offset}"),
        };
        match self.component {
            SiteComponent::Residual => write!(f, "resid.{}@{pos}", self.layer),
            SiteComponent::HeadOutput { head } => write!(f, "head.{}.{head}@{pos}", self.layer),
        }
    }
}

fn writer_before(kind: NodeKind, layer: usize) -> bool {
    match kind {
        NodeKind::Embedding => true,
        NodeKind::Head { layer: l, .. } | NodeKind::Mlp { layer: l } => l < layer,
        NodeKind::Logits => false,
    }
}

fn reads_residual(kind: NodeKind, layer: usize) -> bool {
    match kind {
        NodeKind::Embedding => false,
        NodeKind::Head { layer: l, .. } | NodeKind::Mlp { layer: l } => l >= layer,
        NodeKind::Logits => true,
    }
}

/// Site vector at `pos` of a cached forward pass.
pub(crate) fn site_vector(
    model: &TransformerModel,
    cache: &ActivationCache,
    site: &InterventionSite,
    pos: usize,
) -> Result<Vec<f64>> {
    let g = model.graph();
    match site.component {
        SiteComponent::Residual => {
            let mut h = vec![0.0; g.d_model()];
            for (u, &kind) in g.nodes().iter().enumerate() {
                if writer_before(kind, site.layer) {
                    h.iter_mut().zip(cache.contribution(u, pos)).for_each(|(a, b)| *a += b);
                }
            }
            Ok(h)
        }
        SiteComponent::HeadOutput { .. } => {
            let node = site
                .head_node(model)
                .ok_or_else(|| Error::invalid(format!("site {site} is not in the model")))?;
            Ok(cache.contribution(node, pos).to_vec())
        }
    }
}

/// Site vector of `tokens` and the resolved position.
pub fn capture(model: &TransformerModel, tokens: &[usize], site: &InterventionSite) -> Result<(Vec<f64>, usize)> {
    site.validate(model)?;
    let pos = site.position.resolve(tokens.len())?;
    let (_, cache) = model.forward_with_cache(tokens)?;
    Ok((site_vector(model, &cache, site, pos)?, pos))
}

/// Change applied at the site: a `[T, d]` tensor that is zero except at the site row.
pub(crate) enum Delta {
    Value(Tensor),
    Var(Var),
}

/// Adds a delta to the site, so the site vector seen by every downstream reader
/// becomes the replacement value.
pub(crate) struct SiteHooks {
    site: InterventionSite,
    head_node: Option<NodeId>,
    kinds: Vec<NodeKind>,
    delta: Delta,
}

impl SiteHooks {
    pub(crate) fn new(model: &TransformerModel, site: &InterventionSite, delta: Delta) -> Self {
        Self {
            site: *site,
            head_node: site.head_node(model),
            kinds: model.graph().nodes().to_vec(),
            delta,
        }
    }

    fn delta_var(&self, tape: &mut Tape) -> Result<Var> {
        match &self.delta {
            Delta::Value(t) => tape.constant(t.clone()),
            Delta::Var(v) => Ok(*v),
        }
    }
}

impl Hooks for SiteHooks {
    fn reader_input(&self, tape: &mut Tape, node: NodeId, input: Var) -> Result<Var> {
        if self.site.component == SiteComponent::Residual && reads_residual(self.kinds[node], self.site.layer) {
            let d = self.delta_var(tape)?;
            return tape.add(input, d);
        }
        Ok(input)
    }

    fn node_output(&self, tape: &mut Tape, node: NodeId, out: Var) -> Result<Var> {
        if Some(node) == self.head_node {
            let d = self.delta_var(tape)?;
            return tape.add(out, d);
        }
        Ok(out)
    }
}

/// `[len, d]` tensor holding `row` at `pos` and zeros elsewhere.
pub(crate) fn placed_value(row: &[f64], pos: usize, len: usize) -> Tensor {
    let d = row.len();
    let mut t = Tensor::zeros(&[len, d]);
    t.row_mut(pos).copy_from_slice(row);
    t
}

/// Tape version of [`placed_value`] for a `[1, d]` row.
pub(crate) fn placed_var(tape: &mut Tape, row: Var, pos: usize, len: usize, d: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    if pos > 0 {
        parts.push(tape.constant(Tensor::zeros(&[pos, d]))?);
    }
    parts.push(row);
    if pos + 1 < len {
        parts.push(tape.constant(Tensor::zeros(&[len - pos - 1, d]))?);
    }
    if parts.len() == 1 {
        return Ok(row);
    }
    tape.concat(&parts, 0)
}
