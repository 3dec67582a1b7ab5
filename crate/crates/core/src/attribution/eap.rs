// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-based edge scores: plain attribution patching and its two
//! integrated-gradients variants.

use rayon::prelude::*;

use super::{AttributionScores, NodeScores, Provenance};
use crate::autodiff::{dot, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::{logit_diff_var, AblationSpec, Hooks, TransformerModel};
use crate::tasks::{dataset_fingerprint, TaskInstance};
use crate::util::mean_of;

/// Quadrature points used when a caller does not choose.
pub const DEFAULT_IG_STEPS: usize = 32;

/// Where the integration path of the gradient term runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgPath {
    /// Interpolate the input embedding only.
    Inputs,
    /// Shift every node output by the same fraction of its clean-to-ablation delta.
    Activations,
}

/// Replaces the embedding output with a gradient leaf and optionally shifts node outputs.
struct Interpolate<'a> {
    embedding: Var,
    offsets: Option<&'a [Option<Var>]>,
}

impl Hooks for Interpolate<'_> {
    fn node_output(&self, tape: &mut Tape, node: NodeId, out: Var) -> Result<Var> {
        if node == 0 {
            return Ok(self.embedding);
        }
        match self.offsets.and_then(|o| o[node]) {
            Some(off) => tape.add(out, off),
            None => Ok(out),
        }
    }
}

fn lerp(a: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    a.zip_map(b, |x, y| x + alpha * (y - x)).expect("same shape")
}

/// Gradient of `m` with respect to every reader input, averaged over the
/// left-Riemann points `alpha = j / steps`, plus the embedding gradient.
fn averaged_grads(
    model: &TransformerModel,
    inst: &TaskInstance,
    clean: &[Tensor],
    source: &[Tensor],
    steps: usize,
    path: IgPath,
) -> Result<(Vec<Option<Vec<f64>>>, Vec<f64>)> {
    let n = model.graph().n_nodes();
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut emb_sum = vec![0.0; clean[0].numel()];
    for j in 0..steps {
        let alpha = j as f64 / steps as f64;
        let mut tape = Tape::new();
        let wv = model.weights().to_tape(&mut tape, false)?;
        let emb_value = if j == 0 {
            clean[0].clone()
        } else {
            lerp(&clean[0], &source[0], alpha)
        };
        let embedding = tape.param(emb_value)?;
        let offsets = match path {
            IgPath::Activations if j > 0 => Some(
                (0..n)
                    .map(|u| {
                        if u == 0 || u == n - 1 {
                            return Ok(None);
                        }
                        let d = source[u].zip_map(&clean[u], |s, c| alpha * (s - c))?;
                        tape.constant(d).map(Some)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let hooks = Interpolate {
            embedding,
            offsets: offsets.as_deref(),
        };
        let out = model.run(&mut tape, &wv, &inst.tokens, &hooks)?;
        let m = logit_diff_var(&mut tape, out.logits, inst.answer, inst.cf_answer)?;
        tape.backward(m)?;
        for (v, input) in out.inputs.iter().enumerate() {
            let Some(input) = input else { continue };
            let g = tape.grad_data(*input);
            match &mut sums[v] {
                Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => sums[v] = Some(g),
            }
        }
        emb_sum
            .iter_mut()
            .zip(tape.grad_data(embedding))
            .for_each(|(a, b)| *a += b);
    }
    if steps > 1 {
        let k = steps as f64;
        for s in sums.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v /= k);
        }
        emb_sum.iter_mut().for_each(|v| *v /= k);
    }
    Ok((sums, emb_sum))
}

fn instance_edge_scores(
    model: &TransformerModel,
    inst: &TaskInstance,
    ablation: &AblationSpec,
    steps: usize,
    path: IgPath,
    index: usize,
) -> Result<Vec<f64>> {
    let g = model.graph();
    let (_, cache) = model.forward_with_cache(&inst.tokens)?;
    let source = ablation.source(model, inst)?;
    let (grads, _) = averaged_grads(model, inst, &cache.outputs, &source, steps, path)?;
    let deltas: Vec<Vec<f64>> = (0..g.n_nodes())
        .map(|u| {
            source[u]
                .data()
                .iter()
                .zip(cache.outputs[u].data())
                .map(|(s, c)| s - c)
                .collect()
        })
        .collect();
    let scores: Vec<f64> = g
        .edges()
        .iter()
        .map(|e| dot(&deltas[e.src], grads[e.dst].as_ref().expect("reader has an input")))
        .collect();
    if let Some(e) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite gradient on instance {index} (edge {})",
            g.edge_name(e)
        )));
    }
    Ok(scores)
}

pub(crate) fn provenance(method: &str, ablation: &AblationSpec, data: &[TaskInstance], steps: Option<usize>) -> Provenance {
    Provenance {
        method: method.into(),
        ablation: Some(ablation.kind().to_string()),
        dataset: Some(format!("{:016x}", dataset_fingerprint(data))),
        steps,
        ..Provenance::default()
    }
}

fn gradient_scores(
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    steps: usize,
    path: IgPath,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("attribution needs at least one instance"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let rows = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| instance_edge_scores(model, inst, ablation, steps, path, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&rows))
}

/// First-order estimate of each edge's patching effect on `m`:
/// the mean over instances of `(z'_u - z_u) . dm/d input(v)`.
pub fn eap_scores(model: &TransformerModel, data: &[TaskInstance], ablation: &AblationSpec) -> Result<AttributionScores> {
    let v = gradient_scores(model, data, ablation, 1, IgPath::Inputs)?;
    AttributionScores::new(model.graph().clone(), v, provenance("eap", ablation, data, None))
}

/// Attribution patching with the gradient averaged along the straight line
/// from clean to ablation input embeddings.
pub fn eap_ig_inputs_scores(
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    steps: usize,
) -> Result<AttributionScores> {
    let v = gradient_scores(model, data, ablation, steps, IgPath::Inputs)?;
    AttributionScores::new(model.graph().clone(), v, provenance("eap-ig-inputs", ablation, data, Some(steps)))
}

/// Attribution patching with the gradient averaged along a path in node
/// activation space.
pub fn eap_ig_acts_scores(
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    steps: usize,
) -> Result<AttributionScores> {
    let v = gradient_scores(model, data, ablation, steps, IgPath::Activations)?;
    AttributionScores::new(model.graph().clone(), v, provenance("eap-ig-acts", ablation, data, Some(steps)))
}

/// Node scores `(z'_u - z_u) . dm/dz_u`; with `ig_steps` the gradient is
/// integrated over input embeddings.
pub fn node_attribution_scores(
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    ig_steps: Option<usize>,
) -> Result<NodeScores> {
    let g = model.graph();
    let edge = gradient_scores(model, data, ablation, ig_steps.unwrap_or(1), IgPath::Inputs)?;
    // z_u reaches every reader additively, so dm/dz_u is the sum over its out-edges
    let values = (0..g.n_nodes())
        .map(|u| g.outgoing(u).iter().map(|&e| edge[e]).sum())
        .collect();
    let method = if ig_steps.is_some() { "nap-ig" } else { "nap" };
    Ok(NodeScores {
        graph: g.clone(),
        values,
        provenance: provenance(method, ablation, data, ig_steps),
    })
}

/// Integrated-gradients attribution of `m` to each input-embedding coordinate,
/// `(z - z') * mean_alpha dm/dz`, shaped `[T, d]`.
///
/// Its sum approximates `m(x) - m(x')`.
pub fn embedding_attributions(model: &TransformerModel, inst: &TaskInstance, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let (_, clean) = model.forward_with_cache(&inst.tokens)?;
    let source = AblationSpec::Counterfactual.source(model, inst)?;
    let (_, g) = averaged_grads(model, inst, &clean.outputs, &source, steps, IgPath::Inputs)?;
    let data = clean.outputs[0]
        .data()
        .iter()
        .zip(source[0].data())
        .zip(&g)
        .map(|((c, s), g)| (c - s) * g)
        .collect();
    Tensor::new(clean.outputs[0].shape().to_vec(), data)
}
