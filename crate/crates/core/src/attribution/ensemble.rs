// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use super::{
    eap_ig_acts_scores, eap_ig_inputs_scores, eap_scores, ensemble_sequential, AttributionScores, PruneConfig,
    Provenance,
};
use crate::error::{Error, Result};
use crate::model::{AblationSpec, TransformerModel};
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, PartialEq)]
pub enum Merge {
    Mean,
    /// Weighted mean; weights are normalized to sum to one.
    Weighted(Vec<f64>),
    Max,
    Min,
}

fn check_same_edges(sets: &[AttributionScores]) -> Result<()> {
    let first = sets[0].graph();
    for s in &sets[1..] {
        if s.graph() == first {
            continue;
        }
        let names = |g: &crate::graph::ComputationGraph| -> BTreeSet<String> {
            (0..g.n_edges()).map(|e| g.edge_name(e).to_string()).collect()
        };
        let (a, b) = (names(first), names(s.graph()));
        let diff: Vec<String> = a.symmetric_difference(&b).cloned().collect();
        return Err(Error::invalid(format!(
            "score sets cover different edges; symmetric difference: [{}]",
            diff.join(", ")
        )));
    }
    Ok(())
}

/// Merges score sets edge by edge after dividing each by its largest magnitude.
pub fn ensemble_parallel(sets: &[AttributionScores], merge: &Merge) -> Result<AttributionScores> {
    if sets.len() < 2 {
        return Err(Error::invalid("ensembling needs at least two score sets"));
    }
    check_same_edges(sets)?;
    let norm: Vec<AttributionScores> = sets.iter().map(AttributionScores::normalized).collect();
    let n = norm[0].values().len();
    let weights = match merge {
        Merge::Weighted(w) => {
            if w.len() != sets.len() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::invalid("one non-negative weight per score set required"));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid("weights sum to zero"));
            }
            w.iter().map(|x| x / total).collect()
        }
        _ => vec![1.0 / sets.len() as f64; sets.len()],
    };
    let values = (0..n)
        .map(|e| {
            let col = norm.iter().map(|s| s.get(e));
            let first = norm[0].get(e);
            if !matches!(merge, Merge::Max | Merge::Min) && norm.iter().all(|s| s.get(e) == first) {
                // any average of equal values is that value; avoid rounding drift
                return first;
            }
            match merge {
                Merge::Max => col.fold(f64::NEG_INFINITY, f64::max),
                Merge::Min => col.fold(f64::INFINITY, f64::min),
                Merge::Mean => col.sum::<f64>() / sets.len() as f64,
                Merge::Weighted(_) => col.zip(&weights).map(|(v, w)| v * w).sum(),
            }
        })
        .collect();
    let members: Vec<&str> = sets.iter().map(|s| s.provenance().method.as_str()).collect();
    let mut prov = Provenance::named(format!("parallel-{}", merge_name(merge)));
    prov.ablation = sets[0].provenance().ablation.clone();
    prov.dataset = sets[0].provenance().dataset.clone();
    prov.notes.push(format!("members: {}", members.join(", ")));
    AttributionScores::new(sets[0].graph().clone(), values, prov)
}

fn merge_name(m: &Merge) -> &'static str {
    match m {
        Merge::Mean => "mean",
        Merge::Weighted(_) => "weighted",
        Merge::Max => "max",
        Merge::Min => "min",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    pub ablation: AblationSpec,
    pub ig_steps: usize,
    /// Sequential member; `None` leaves it out.
    pub prune: Option<PruneConfig>,
    /// Instances used for the sequential member (a prefix of the data).
    pub prune_instances: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            ablation: AblationSpec::Counterfactual,
            ig_steps: super::DEFAULT_IG_STEPS,
            prune: Some(PruneConfig::default()),
            prune_instances: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridReport {
    pub scores: AttributionScores,
    /// EAP, EAP-IG-inputs, EAP-IG-activations and, when enabled, the sequential scores.
    pub members: Vec<AttributionScores>,
}

/// Unweighted mean of the normalized EAP variants and the edge-pruning gates
/// warm-started from EAP-IG-inputs.
pub fn ensemble_hybrid(model: &TransformerModel, data: &[TaskInstance], cfg: &HybridConfig) -> Result<HybridReport> {
    let eap = eap_scores(model, data, &cfg.ablation)?;
    let ig_in = eap_ig_inputs_scores(model, data, &cfg.ablation, cfg.ig_steps)?;
    let ig_acts = eap_ig_acts_scores(model, data, &cfg.ablation, cfg.ig_steps)?;
    let mut members = vec![eap, ig_in, ig_acts];
    if let Some(pc) = &cfg.prune {
        let subset = &data[..cfg.prune_instances.clamp(1, data.len())];
        let seq = ensemble_sequential(Some(&members[1]), model, subset, &cfg.ablation, pc)?;
        members.push(seq.scores);
    }
    let mut scores = ensemble_parallel(&members, &Merge::Mean)?;
    scores.provenance_mut().method = "hybrid".into();
    Ok(HybridReport { scores, members })
}
