// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path-restricted patching.
//!
//! A message starts on the first edge of a path as the difference between a
//! replacement and the clean embedding. Each node on the path recomputes its
//! output from its clean input plus the incoming message; the change in its
//! output becomes the next message. Off-path edges keep their clean values,
//! so only effects travelling along the path reach the logits.

use std::str::FromStr;

use rayon::prelude::*;

use super::{AttributionScores, Provenance};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::EdgeId;
use crate::model::{logit_diff, ActivationCache, TransformerModel};
use crate::util::mean_of;
use crate::tasks::{dataset_fingerprint, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathMode {
    /// The path carries nothing: its message removes the clean embedding.
    Ablate,
    /// The path carries the counterfactual embedding.
    #[default]
    Counterfactual,
}

impl FromStr for PathMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablate" => Ok(PathMode::Ablate),
            "counterfactual" | "cf" => Ok(PathMode::Counterfactual),
            other => Err(Error::invalid(format!("unknown path mode {other:?} (ablate, counterfactual)"))),
        }
    }
}

fn check_path(model: &TransformerModel, path: &[EdgeId]) -> Result<()> {
    let g = model.graph();
    if path.is_empty() {
        return Err(Error::invalid("empty path"));
    }
    if let Some(&e) = path.iter().find(|&&e| e >= g.n_edges()) {
        return Err(Error::UnknownEdge(format!("edge id {e}")));
    }
    if g.edge(path[0]).src != g.embedding() || g.edge(*path.last().expect("non-empty")).dst != g.logits() {
        return Err(Error::invalid("path must run from the embedding to the logits"));
    }
    for w in path.windows(2) {
        if g.edge(w[0]).dst != g.edge(w[1]).src {
            return Err(Error::invalid(format!(
                "disconnected path: {} does not continue into {}",
                g.edge_name(w[0]),
                g.edge_name(w[1])
            )));
        }
    }
    Ok(())
}

fn path_effect(
    model: &TransformerModel,
    inst: &TaskInstance,
    path: &[EdgeId],
    clean: &ActivationCache,
    replacement: &Tensor,
    clean_m: f64,
) -> Result<f64> {
    let g = model.graph();
    let mut msg = replacement.zip_map(&clean.outputs[0], |r, c| r - c)?;
    let mut tape = Tape::new();
    let wv = model.weights().to_tape(&mut tape, false)?;
    for &e in path {
        let v = g.edge(e).dst;
        let clean_in = clean.inputs[v].as_ref().expect("reader input");
        let input = tape.constant(clean_in.zip_map(&msg, |a, b| a + b)?)?;
        let (_, out) = model.node_forward(&mut tape, &wv, v, input, None)?;
        if v == g.logits() {
            let m = logit_diff(tape.value(out), inst.answer, inst.cf_answer)?;
            return Ok(m - clean_m);
        }
        msg = tape.value(out).zip_map(&clean.outputs[v], |a, b| a - b)?;
    }
    unreachable!("validated paths end at the logits")
}

/// Change in `m` carried by exactly one embedding-to-logits path.
pub fn isolate_path_effect(
    model: &TransformerModel,
    inst: &TaskInstance,
    path: &[EdgeId],
    mode: PathMode,
) -> Result<f64> {
    check_path(model, path)?;
    let (logits, clean) = model.forward_with_cache(&inst.tokens)?;
    let clean_m = logit_diff(&logits, inst.answer, inst.cf_answer)?;
    let replacement = replacement(model, inst, &clean, mode)?;
    path_effect(model, inst, path, &clean, &replacement, clean_m)
}

fn replacement(model: &TransformerModel, inst: &TaskInstance, clean: &ActivationCache, mode: PathMode) -> Result<Tensor> {
    Ok(match mode {
        PathMode::Ablate => Tensor::zeros(clean.outputs[0].shape()),
        PathMode::Counterfactual => model.forward_with_cache(&inst.cf_tokens)?.1.outputs.swap_remove(0),
    })
}

/// Per-edge sum of the isolated effects of every path through the edge,
/// averaged over instances.
pub fn ipe_edge_scores(
    model: &TransformerModel,
    data: &[TaskInstance],
    mode: PathMode,
    path_limit: usize,
) -> Result<AttributionScores> {
    if data.is_empty() {
        return Err(Error::invalid("attribution needs at least one instance"));
    }
    let g = model.graph();
    let paths = g.enumerate_paths(path_limit)?;
    let rows = data
        .par_iter()
        .map(|inst| {
            let (logits, clean) = model.forward_with_cache(&inst.tokens)?;
            let clean_m = logit_diff(&logits, inst.answer, inst.cf_answer)?;
            let rep = replacement(model, inst, &clean, mode)?;
            let mut row = vec![0.0; g.n_edges()];
            for p in &paths {
                let eff = path_effect(model, inst, p, &clean, &rep, clean_m)?;
                for &e in p {
                    row[e] += eff;
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance {
        method: "ipe".into(),
        ablation: Some(match mode {
            PathMode::Ablate => "ablate".into(),
            PathMode::Counterfactual => "cf".into(),
        }),
        dataset: Some(format!("{:016x}", dataset_fingerprint(data))),
        notes: vec![format!("{} paths", paths.len())],
        ..Provenance::default()
    };
    AttributionScores::new(g.clone(), mean_of(&rows), prov)
}
