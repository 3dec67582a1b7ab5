// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifact::AlignmentArtifact;
use super::site::{capture, placed_value, Delta, InterventionSite, SiteHooks};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{argmax_final, TransformerModel};
use crate::tasks::{HighLevelCausalModel, TaskInstance};
use crate::util::{rng, Fnv};

/// Base and source prompts with the answer the causal model predicts after the interchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterchangePair {
    pub base: Vec<usize>,
    pub source: Vec<usize>,
    pub expected: usize,
}

/// Interchange pairs for one causal variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub variable: String,
    pub pairs: Vec<InterchangePair>,
}

impl PairSet {
    /// `n` pairs with base and source drawn independently and uniformly from `data`.
    pub fn sample(
        data: &[TaskInstance],
        causal: &HighLevelCausalModel,
        variable: &str,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() || n == 0 {
            return Err(Error::invalid("pair sampling needs instances and n > 0"));
        }
        if !causal.has_variable(variable) {
            return Err(Error::invalid(format!("undefined causal variable {variable}")));
        }
        let mut r = rng(seed);
        let pairs = (0..n)
            .map(|_| {
                let b = &data[r.random_range(0..data.len())];
                let c = &data[r.random_range(0..data.len())];
                Ok(InterchangePair {
                    base: b.tokens.clone(),
                    source: c.tokens.clone(),
                    expected: causal.expected_output(b, c, variable)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            variable: variable.into(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.bytes(self.variable.as_bytes());
        for p in &self.pairs {
            h.u64(p.base.len() as u64);
            p.base.iter().chain(&p.source).for_each(|&t| {
                h.u64(t as u64);
            });
            h.u64(p.expected as u64);
        }
        h.finish()
    }

    /// Control task: the expected tokens permuted across pairs.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut labels: Vec<usize> = self.pairs.iter().map(|p| p.expected).collect();
        labels.shuffle(&mut rng(seed));
        Self {
            variable: format!("{}:shuffled", self.variable),
            pairs: self
                .pairs
                .iter()
                .zip(labels)
                .map(|(p, expected)| InterchangePair {
                    expected,
                    ..p.clone()
                })
                .collect(),
        }
    }

    /// Accuracy of always answering the most frequent expected token.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = std::collections::BTreeMap::new();
        for p in &self.pairs {
            *counts.entry(p.expected).or_insert(0usize) += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        best as f64 / self.pairs.len().max(1) as f64
    }
}

/// Logits of `tokens` with the site vector replaced by `value`.
pub fn patch_site(model: &TransformerModel, tokens: &[usize], site: &InterventionSite, value: &[f64]) -> Result<Tensor> {
    let (h, pos) = capture(model, tokens, site)?;
    if value.len() != h.len() {
        return Err(Error::shape("patch_site", format!("value of {} for width {}", value.len(), h.len())));
    }
    let delta: Vec<f64> = value.iter().zip(&h).map(|(v, b)| v - b).collect();
    let hooks = SiteHooks::new(model, site, Delta::Value(placed_value(&delta, pos, tokens.len())));
    model.forward_hooked(tokens, &hooks)
}

fn check_binding(model: &TransformerModel, artifact: &AlignmentArtifact) -> Result<()> {
    if artifact.model_fingerprint != model.fingerprint() {
        return Err(Error::Incompatible(format!(
            "artifact is bound to model {:016x}, got {:016x}",
            artifact.model_fingerprint,
            model.fingerprint()
        )));
    }
    artifact.site.validate(model)?;
    if artifact.featurizer.width != artifact.site.width(model) {
        return Err(Error::Incompatible("featurizer width differs from the site width".into()));
    }
    Ok(())
}

fn intervened_logits(model: &TransformerModel, base: &[usize], source: &[usize], artifact: &AlignmentArtifact) -> Result<Tensor> {
    if artifact.features.is_empty() {
        return model.forward(base);
    }
    let f = &artifact.featurizer;
    let (hc, _) = capture(model, source, &artifact.site)
        .map_err(|e| Error::invalid(format!("capturing the source site failed: {e}")))?;
    let (hb, _) = capture(model, base, &artifact.site)
        .map_err(|e| Error::invalid(format!("capturing the base site failed: {e}")))?;
    let xc = f.features(&hc)?;
    let mut y = f.features(&hb)?;
    for &i in artifact.features.as_slice() {
        y[i] = xc[i];
    }
    let value = f.inverse(&y)?;
    patch_site(model, base, &artifact.site, &value)
}

/// Logits of the base run with features `Π` taken from the source run.
pub fn interchange_logits(
    model: &TransformerModel,
    base: &[usize],
    source: &[usize],
    artifact: &AlignmentArtifact,
) -> Result<Tensor> {
    check_binding(model, artifact)?;
    intervened_logits(model, base, source, artifact)
}

/// Greedy final-position token after the interchange intervention.
pub fn interchange_intervene(
    model: &TransformerModel,
    base: &[usize],
    source: &[usize],
    artifact: &AlignmentArtifact,
) -> Result<usize> {
    interchange_logits(model, base, source, artifact).map(|l| argmax_final(&l))
}

/// Fraction of pairs whose intervened output equals the expected token.
pub fn faithfulness_score(model: &TransformerModel, artifact: &AlignmentArtifact, pairs: &PairSet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("faithfulness needs at least one pair"));
    }
    check_binding(model, artifact)?;
    let hits = pairs
        .pairs
        .par_iter()
        .map(|p| intervened_logits(model, &p.base, &p.source, artifact).map(|l| argmax_final(&l) == p.expected))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
