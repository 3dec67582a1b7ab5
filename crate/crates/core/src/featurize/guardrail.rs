// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::intervene::{faithfulness_score, PairSet};
use super::site::InterventionSite;
use super::train::{train_nonlinear, FeaturizeConfig};
use crate::error::{Error, Result};
use crate::model::TransformerModel;

/// Allowed excess of control faithfulness over the label-blind baseline.
pub const GUARDRAIL_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailReport {
    /// Faithfulness of a nonlinear featurizer trained and evaluated on shuffled labels.
    pub control_faithfulness: f64,
    /// Rate of always answering the most frequent control label.
    pub random_baseline: f64,
    pub margin: f64,
    pub passed: bool,
}

impl GuardrailReport {
    pub fn enforce(&self) -> Result<()> {
        if self.passed {
            return Ok(());
        }
        Err(Error::Guardrail(format!(
            "control-task faithfulness {:.3} exceeds the random baseline {:.3} by more than {:.3}",
            self.control_faithfulness, self.random_baseline, self.margin
        )))
    }
}

/// Trains the nonlinear featurizer with the same settings on a control task
/// whose expected tokens are shuffled across pairs, and compares its held-out
/// faithfulness against the label-blind baseline.
pub fn control_guardrail(
    model: &TransformerModel,
    site: InterventionSite,
    train: &PairSet,
    eval: &PairSet,
    dims: usize,
    hidden: usize,
    cfg: &FeaturizeConfig,
    margin: f64,
) -> Result<GuardrailReport> {
    let control_train = train.shuffled_labels(cfg.seed.wrapping_add(101));
    let control_eval = eval.shuffled_labels(cfg.seed.wrapping_add(202));
    let artifact = train_nonlinear(model, site, &control_train, dims, hidden, cfg)?;
    let control_faithfulness = faithfulness_score(model, &artifact, &control_eval)?;
    let random_baseline = control_eval.majority_rate();
    Ok(GuardrailReport {
        control_faithfulness,
        random_baseline,
        margin,
        passed: control_faithfulness <= random_baseline + margin,
    })
}
