// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use super::eap::provenance;
use super::AttributionScores;
use crate::error::{Error, Result};
use crate::model::{logit_diff, AblationSpec, TransformerModel};
use crate::util::mean_of;
use crate::tasks::TaskInstance;

/// Largest `edges x instances` product patched exhaustively by default.
pub const DEFAULT_PATCH_BUDGET: usize = 2_000_000;

/// Per-instance effect on `m` of patching each edge alone.
pub(crate) fn instance_patch_effects(
    model: &TransformerModel,
    inst: &TaskInstance,
    ablation: &AblationSpec,
) -> Result<Vec<f64>> {
    let n = model.graph().n_edges();
    let source = ablation.source(model, inst)?;
    let clean = logit_diff(&model.forward(&inst.tokens)?, inst.answer, inst.cf_answer)?;
    let mut mask = vec![false; n];
    let mut out = Vec::with_capacity(n);
    for e in 0..n {
        mask[e] = true;
        let l = model.forward_with_edge_mask(&inst.tokens, &mask, &source)?;
        mask[e] = false;
        out.push(logit_diff(&l, inst.answer, inst.cf_answer)? - clean);
    }
    Ok(out)
}

/// Mean over instances of `m(only (u, v) patched) - m(clean)` for every edge.
pub fn exact_edge_patch_scores(
    model: &TransformerModel,
    data: &[TaskInstance],
    ablation: &AblationSpec,
    budget: usize,
) -> Result<AttributionScores> {
    if data.is_empty() {
        return Err(Error::invalid("attribution needs at least one instance"));
    }
    let n = model.graph().n_edges();
    let work = n.saturating_mul(data.len());
    if work > budget {
        return Err(Error::Budget(format!(
            "{n} edges x {} instances = {work} patched runs exceeds {budget}; sub-sample the dataset",
            data.len()
        )));
    }
    let rows = data
        .par_iter()
        .map(|inst| instance_patch_effects(model, inst, ablation))
        .collect::<Result<Vec<_>>>()?;
    AttributionScores::new(model.graph().clone(), mean_of(&rows), provenance("eactp", ablation, data, None))
}
