// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit-track metrics.
//!
//! `m` is the final-position logit difference `logit(y) - logit(y')`.
//! Faithfulness compares the dataset-mean `m` of a circuit, with every
//! non-circuit edge patched from the ablation source, against the full
//! model and the empty circuit:
//!
//! ```text
//! f(C) = (m(C) - m(empty)) / (m(full) - m(empty))
//! ```
//!
//! CPR and CMD summarize a faithfulness curve over edge fractions `k` with
//! trapezoidal weights in `log10(k)` normalized to sum to one.

mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionScores;
use crate::error::{Error, Result};
use crate::graph::{Circuit, CircuitSeries, EdgeId};
use crate::model::{logit_diff, AblationSpec, PatchPlan, TransformerModel};
use crate::tasks::{dataset_fingerprint, TaskInstance};

pub use report::{render_table, MetricReport};

/// Smallest |m(full) - m(empty)| accepted as a faithfulness denominator.
pub const MIN_DENOMINATOR: f64 = 1e-9;

/// `m` on one instance, optionally under a patch plan.
pub fn metric_m(model: &TransformerModel, inst: &TaskInstance, plan: Option<&PatchPlan>) -> Result<f64> {
    let logits = match plan {
        Some(p) => model.forward_with_patches(&inst.tokens, p)?,
        None => model.forward(&inst.tokens)?,
    };
    logit_diff(&logits, inst.answer, inst.cf_answer)
}

/// Mean of `m` over `data` with no patches.
pub fn dataset_m(model: &TransformerModel, data: &[TaskInstance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("metric of an empty dataset"));
    }
    let per = data
        .par_iter()
        .map(|inst| metric_m(model, inst, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `m` on one instance with every edge outside `circuit` patched.
fn instance_circuit_m(model: &TransformerModel, circuit: &Circuit, inst: &TaskInstance, ablation: &AblationSpec) -> Result<f64> {
    let g = model.graph();
    let member = circuit
        .membership()
        .ok_or_else(|| Error::invalid("score circuits must be thresholded before evaluation"))?;
    let source = ablation.source(model, inst)?;
    let logits = if circuit.neurons().is_empty() {
        let patched: Vec<bool> = member.iter().map(|&m| !m).collect();
        model.forward_with_edge_mask(&inst.tokens, &patched, &source)?
    } else {
        // member edges of restricted nodes keep only the listed coordinates
        let (_, clean) = model.forward_with_cache(&inst.tokens)?;
        let mut plan = PatchPlan::new(ablation.kind());
        for e in 0..g.n_edges() {
            let src = g.edge(e).src;
            let keep = if member[e] { circuit.neurons().get(&src) } else { None };
            if member[e] && keep.is_none() {
                continue;
            }
            for t in 0..inst.tokens.len() {
                let mut row = source[src].row(t).to_vec();
                if let Some(keep) = keep {
                    for &i in keep {
                        row[i] = clean.outputs[src].row(t)[i];
                    }
                }
                plan.insert(e, t, row);
            }
        }
        model.forward_with_patches(&inst.tokens, &plan)?
    };
    logit_diff(&logits, inst.answer, inst.cf_answer)
}

/// Dataset-mean `m` of a circuit, reduced in instance order.
pub fn circuit_m(model: &TransformerModel, circuit: &Circuit, data: &[TaskInstance], ablation: &AblationSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("metric of an empty dataset"));
    }
    if circuit.graph() != model.graph() {
        return Err(Error::invalid("circuit belongs to another graph"));
    }
    let per = data
        .par_iter()
        .map(|inst| instance_circuit_m(model, circuit, inst, ablation))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `m(full)` and `m(empty)` for one (model, dataset, ablation) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub m_full: f64,
    pub m_empty: f64,
}

impl Anchors {
    pub fn compute(model: &TransformerModel, data: &[TaskInstance], ablation: &AblationSpec) -> Result<Self> {
        let g = model.graph().clone();
        let m_full = circuit_m(model, &Circuit::full(g.clone()), data, ablation)?;
        let m_empty = circuit_m(model, &Circuit::empty(g), data, ablation)?;
        let a = Self { m_full, m_empty };
        a.denominator()?;
        Ok(a)
    }

    fn denominator(&self) -> Result<f64> {
        let d = self.m_full - self.m_empty;
        if !(d.abs() > MIN_DENOMINATOR) {
            return Err(Error::Degenerate(format!(
                "m(full) = {} and m(empty) = {} coincide",
                self.m_full, self.m_empty
            )));
        }
        Ok(d)
    }

    pub fn faithfulness(&self, m_circuit: f64) -> Result<f64> {
        Ok((m_circuit - self.m_empty) / self.denominator()?)
    }
}

pub fn faithfulness(model: &TransformerModel, circuit: &Circuit, data: &[TaskInstance], ablation: &AblationSpec) -> Result<f64> {
    let anchors = Anchors::compute(model, data, ablation)?;
    anchors.faithfulness(circuit_m(model, circuit, data, ablation)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    /// `(k, f)` with strictly increasing `k`.
    pub points: Vec<(f64, f64)>,
    pub ablation: String,
    pub dataset: String,
    pub m_full: f64,
    pub m_empty: f64,
}

impl FaithfulnessCurve {
    pub fn new(points: Vec<(f64, f64)>, ablation: &str, dataset: &str, anchors: Anchors) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("empty faithfulness curve"));
        }
        if points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::invalid("curve thresholds must be strictly increasing"));
        }
        if points.iter().any(|&(k, f)| !(k > 0.0) || !f.is_finite()) {
            return Err(Error::invalid("curve needs positive thresholds and finite values"));
        }
        Ok(Self {
            points,
            ablation: ablation.into(),
            dataset: dataset.into(),
            m_full: anchors.m_full,
            m_empty: anchors.m_empty,
        })
    }

    /// Curve with the given values and no model anchors.
    pub fn from_values(grid: &[f64], values: &[f64]) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::invalid("grid and values differ in length"));
        }
        let anchors = Anchors { m_full: 1.0, m_empty: 0.0 };
        Self::new(grid.iter().copied().zip(values.iter().copied()).collect(), "none", "none", anchors)
    }

    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }
}

/// Faithfulness of every circuit of a series, in threshold order.
pub fn curve(model: &TransformerModel, series: &CircuitSeries, data: &[TaskInstance], ablation: &AblationSpec) -> Result<FaithfulnessCurve> {
    let anchors = Anchors::compute(model, data, ablation)?;
    let values = series
        .entries
        .par_iter()
        .map(|(_, c)| anchors.faithfulness(circuit_m(model, c, data, ablation)?))
        .collect::<Result<Vec<_>>>()?;
    let points = series.grid().into_iter().zip(values).collect();
    FaithfulnessCurve::new(
        points,
        &ablation.kind().to_string(),
        &format!("{:016x}", dataset_fingerprint(data)),
        anchors,
    )
}

/// Trapezoidal weights over `log10(k)`, normalized to sum to one. A single
/// point gets weight one.
pub fn log_trapezoid_weights(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() || grid.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::invalid("weights need a non-empty grid of positive thresholds"));
    }
    if grid.len() == 1 {
        return Ok(vec![1.0]);
    }
    let x: Vec<f64> = grid.iter().map(|k| k.log10()).collect();
    let n = x.len();
    let span = x[n - 1] - x[0];
    if !(span > 0.0) {
        return Err(Error::invalid("thresholds must be strictly increasing"));
    }
    Ok((0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            (left + right) / 2.0 / span
        })
        .collect())
}

fn weighted(curve: &FaithfulnessCurve, f: impl Fn(f64) -> f64) -> f64 {
    let w = log_trapezoid_weights(&curve.grid()).expect("validated curve");
    curve.points.iter().zip(w).map(|(&(_, v), w)| w * f(v)).sum()
}

/// Weighted area under the faithfulness curve; higher is better.
pub fn cpr(curve: &FaithfulnessCurve) -> f64 {
    weighted(curve, |f| f)
}

/// Weighted area between the faithfulness curve and 1; lower is better.
pub fn cmd(curve: &FaithfulnessCurve) -> f64 {
    weighted(curve, |f| (f - 1.0).abs())
}

/// Area under the ROC curve of |score| as a classifier of membership in
/// `truth`; ties count one half.
pub fn ground_truth_auroc(scores: &AttributionScores, truth: &[EdgeId]) -> Result<f64> {
    let n = scores.values().len();
    let mut is_true = vec![false; n];
    for &e in truth {
        *is_true
            .get_mut(e)
            .ok_or_else(|| Error::UnknownEdge(format!("edge id {e}")))? = true;
    }
    let pos: Vec<f64> = (0..n).filter(|&e| is_true[e]).map(|e| scores.get(e).abs()).collect();
    let neg: Vec<f64> = (0..n).filter(|&e| !is_true[e]).map(|e| scores.get(e).abs()).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("AUROC needs both circuit and non-circuit edges"));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}
