// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge pruning with learnable sigmoid gates, optionally warm-started from
//! attribution scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eap::provenance;
use super::AttributionScores;
use crate::autodiff::{sigmoid, Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::EdgeId;
use crate::model::{final_logits, AblationSpec, Hooks, TransformerModel};
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SparsityPenalty {
    /// `weight * mean(gate)`.
    Lagrangian { weight: f64 },
    /// `weight * (mean(gate) - target)^2`, steering towards a fixed edge fraction.
    Budget { target: f64, weight: f64 },
}

impl SparsityPenalty {
    fn value_and_slope(&self, mean_gate: f64) -> (f64, f64) {
        match *self {
            SparsityPenalty::Lagrangian { weight } => (weight * mean_gate, weight),
            SparsityPenalty::Budget { target, weight } => {
                let d = mean_gate - target;
                (weight * d * d, 2.0 * weight * d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub steps: usize,
    pub lr: f64,
    pub penalty: SparsityPenalty,
    /// Log-alpha range that warm-start scores are mapped into.
    pub init_range: (f64, f64),
    /// Log-alpha of every edge on a cold start.
    pub cold_init: f64,
    pub temperature: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.1,
            penalty: SparsityPenalty::Lagrangian { weight: 0.05 },
            init_range: (2.0, 6.0),
            cold_init: 0.0,
            temperature: 1.0,
        }
    }
}

/// Learnable per-edge log-alphas; gate = sigmoid(log_alpha / temperature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedGraphParams {
    pub log_alpha: Vec<f64>,
    pub temperature: f64,
    pub penalty: SparsityPenalty,
}

impl MaskedGraphParams {
    pub fn cold(n_edges: usize, cfg: &PruneConfig) -> Self {
        Self {
            log_alpha: vec![cfg.cold_init; n_edges],
            temperature: cfg.temperature,
            penalty: cfg.penalty,
        }
    }

    /// Affine map of `|score| / max|score|` into `cfg.init_range`.
    pub fn warm(scores: &AttributionScores, cfg: &PruneConfig) -> Self {
        let (lo, hi) = cfg.init_range;
        let m = scores.max_abs();
        let log_alpha = scores
            .values()
            .iter()
            .map(|v| if m > 0.0 { lo + (hi - lo) * v.abs() / m } else { lo })
            .collect();
        Self {
            log_alpha,
            temperature: cfg.temperature,
            penalty: cfg.penalty,
        }
    }

    pub fn gates(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|a| sigmoid(a / self.temperature)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub scores: AttributionScores,
    pub params: MaskedGraphParams,
    /// Full objective before each step and after the last one.
    pub loss_history: Vec<f64>,
}

struct Gated {
    gates: Var,
    sources: Vec<Var>,
    src_of: Vec<usize>,
}

impl Hooks for Gated {
    fn edge_input(&self, tape: &mut Tape, edge: EdgeId, upstream: Var) -> Result<Var> {
        let cf = self.sources[self.src_of[edge]];
        let g = tape.gather(self.gates, &[edge])?;
        let diff = tape.sub(upstream, cf)?;
        let scaled = tape.scale_by(diff, g)?;
        tape.add(cf, scaled)
    }
}

/// Final-position distribution of the full model, used as the KL target.
fn target_probs(model: &TransformerModel, inst: &TaskInstance) -> Result<Vec<f64>> {
    let logits = model.forward(&inst.tokens)?;
    let row = final_logits(&logits);
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter().map(|v| v / z).collect())
}

/// KL(full || gated) at the final position and its log-alpha gradient.
fn instance_kl(
    model: &TransformerModel,
    inst: &TaskInstance,
    source: &[Tensor],
    target: &[f64],
    params: &MaskedGraphParams,
) -> Result<(f64, Vec<f64>)> {
    let g = model.graph();
    let mut tape = Tape::new();
    let wv = model.weights().to_tape(&mut tape, false)?;
    let la = tape.param(Tensor::vector(params.log_alpha.clone()))?;
    let scaled = tape.scale(la, 1.0 / params.temperature)?;
    let gates = tape.sigmoid(scaled)?;
    let sources = source
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let hooks = Gated {
        gates,
        sources,
        src_of: g.edges().iter().map(|e| e.src).collect(),
    };
    let out = model.run(&mut tape, &wv, &inst.tokens, &hooks)?;
    let last = tape.slice_rows(out.logits, inst.tokens.len() - 1, 1)?;
    let logp = tape.log_softmax(last)?;
    let p = tape.constant(Tensor::new(vec![1, target.len()], target.to_vec())?)?;
    let cross = tape.mul(p, logp)?;
    let cross = tape.sum(cross)?;
    let neg_entropy: f64 = target.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum();
    let loss = tape.scale(cross, -1.0)?;
    tape.backward(loss)?;
    Ok((neg_entropy + tape.value(loss).item(), tape.grad_data(la)))
}

/// Optimizes edge gates so the gated model matches the full model under a
/// sparsity penalty. Ungated edges carry the ablation source contribution.
pub fn train_edge_mask(
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    init: MaskedGraphParams,
    cfg: &PruneConfig,
) -> Result<PruneReport> {
    if data.is_empty() {
        return Err(Error::invalid("edge pruning needs at least one instance"));
    }
    let n_edges = model.graph().n_edges();
    if init.log_alpha.len() != n_edges {
        return Err(Error::invalid("log-alpha vector does not match the graph"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let prepared = data
        .par_iter()
        .map(|inst| Ok((ablation.source(model, inst)?, target_probs(model, inst)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut params = init;
    let mut la = Tensor::vector(params.log_alpha.clone());
    let mut opt = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let nd = data.len() as f64;
    for step in 0..=cfg.steps {
        params.log_alpha = la.data().to_vec();
        let results = data
            .par_iter()
            .zip(&prepared)
            .map(|(inst, (src, tgt))| instance_kl(model, inst, src, tgt, &params))
            .collect::<Vec<_>>();
        let mut kl = 0.0;
        let mut grad = vec![0.0; n_edges];
        for r in results {
            let (l, g) = r.map_err(|e| Error::Divergence {
                step,
                what: e.to_string(),
            })?;
            kl += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        kl /= nd;
        grad.iter_mut().for_each(|g| *g /= nd);
        let gates = params.gates();
        let mean_gate = gates.iter().sum::<f64>() / n_edges as f64;
        let (pen, slope) = params.penalty.value_and_slope(mean_gate);
        let loss = kl + pen;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "non-finite pruning loss".into(),
            });
        }
        history.push(loss);
        if step == cfg.steps {
            break;
        }
        for (g, s) in grad.iter_mut().zip(&gates) {
            *g += slope / n_edges as f64 * s * (1.0 - s) / params.temperature;
        }
        opt.step(&mut [&mut la], &[grad])?;
    }
    params.log_alpha = la.data().to_vec();
    let mut prov = provenance("sequential", ablation, data, Some(cfg.steps));
    prov.notes.push(format!("penalty {:?}", cfg.penalty));
    let scores = AttributionScores::new(model.graph().clone(), params.gates(), prov)?;
    Ok(PruneReport {
        scores,
        params,
        loss_history: history,
    })
}

/// Edge pruning whose log-alphas start from `init_scores` (or a cold start).
pub fn ensemble_sequential(
    init_scores: Option<&AttributionScores>,
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    cfg: &PruneConfig,
) -> Result<PruneReport> {
    let init = match init_scores {
        Some(s) => {
            if s.graph() != model.graph() {
                return Err(Error::invalid("initial scores belong to another graph"));
            }
            MaskedGraphParams::warm(s, cfg)
        }
        None => MaskedGraphParams::cold(model.graph().n_edges(), cfg),
    };
    train_edge_mask(model, data, ablation, init, cfg)
}
