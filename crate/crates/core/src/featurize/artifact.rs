// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::featurizer::{FeatureIndices, Featurizer, FeaturizerKind};
use super::intervene::{faithfulness_score, PairSet};
use super::site::{InterventionSite, PositionSelector};
use crate::error::{Error, Result};
use crate::model::TransformerModel;

pub const ARTIFACT_VERSION: u32 = 1;

const META_FILE: &str = "meta.json";
const PARAMS_FILE: &str = "params.json";
const RULE_FILE: &str = "position_rule.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub method: String,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fingerprint of the training pairs.
    pub pairs: Option<String>,
    pub final_loss: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedFaithfulness {
    pub value: f64,
    pub pairs: String,
    pub n_pairs: usize,
}

/// A featurizer bound to a model site and a causal variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentArtifact {
    pub featurizer: Featurizer,
    pub features: FeatureIndices,
    pub site: InterventionSite,
    pub variable: String,
    pub model_fingerprint: u64,
    pub provenance: TrainingProvenance,
    pub faithfulness: Option<RecordedFaithfulness>,
}

impl AlignmentArtifact {
    pub fn new(
        model: &TransformerModel,
        featurizer: Featurizer,
        features: FeatureIndices,
        site: InterventionSite,
        variable: &str,
        provenance: TrainingProvenance,
    ) -> Result<Self> {
        site.validate(model)?;
        featurizer.validate()?;
        if featurizer.width != site.width(model) {
            return Err(Error::invalid("featurizer width differs from the site width"));
        }
        features.check_width(featurizer.width)?;
        Ok(Self {
            featurizer,
            features,
            site,
            variable: variable.into(),
            model_fingerprint: model.fingerprint(),
            provenance,
            faithfulness: None,
        })
    }

    /// Identity featurizer over every coordinate: patching the whole site vector.
    pub fn full_vector(model: &TransformerModel, site: InterventionSite, variable: &str) -> Result<Self> {
        let d = site.width(model);
        Self::new(
            model,
            Featurizer::identity(d),
            FeatureIndices::all(d),
            site,
            variable,
            TrainingProvenance {
                method: "full-vector".into(),
                ..TrainingProvenance::default()
            },
        )
    }

    /// Evaluates on `pairs` and stores the result.
    pub fn record_faithfulness(&mut self, model: &TransformerModel, pairs: &PairSet) -> Result<f64> {
        let value = faithfulness_score(model, self, pairs)?;
        self.faithfulness = Some(RecordedFaithfulness {
            value,
            pairs: format!("{:016x}", pairs.fingerprint()),
            n_pairs: pairs.len(),
        });
        Ok(value)
    }

    /// Copy with the coupling layer removed, keeping the learned rotation and `Π`.
    ///
    /// The recorded faithfulness is dropped since it was measured with the coupling.
    pub fn linear_export(&self) -> Self {
        let mut out = self.clone();
        if out.featurizer.coupling.is_some() {
            out.featurizer = out.featurizer.linear_part();
            out.faithfulness = None;
            out.provenance.notes.push("coupling dropped at export".into());
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    kind: FeaturizerKind,
    site: InterventionSite,
    features: FeatureIndices,
    variable: String,
    model_fingerprint: u64,
    provenance: TrainingProvenance,
    faithfulness: Option<RecordedFaithfulness>,
}

#[derive(Serialize, Deserialize)]
struct Params {
    featurizer: Featurizer,
    /// Row-major inverse of the rotation, stored for consumers that do not invert it themselves.
    inverse: Option<Vec<f64>>,
}

fn transpose(q: &[f64], d: usize) -> Vec<f64> {
    let mut t = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            t[j * d + i] = q[i * d + j];
        }
    }
    t
}

/// Writes the artifact bundle directory at `path`.
pub fn save_artifact(artifact: &AlignmentArtifact, path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    let f = &artifact.featurizer;
    let meta = Meta {
        version: ARTIFACT_VERSION,
        kind: f.kind,
        site: artifact.site,
        features: artifact.features.clone(),
        variable: artifact.variable.clone(),
        model_fingerprint: artifact.model_fingerprint,
        provenance: artifact.provenance.clone(),
        faithfulness: artifact.faithfulness.clone(),
    };
    let params = Params {
        featurizer: f.clone(),
        inverse: f.rotation.as_ref().map(|q| transpose(q, f.width)),
    };
    fs::write(path.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    fs::write(path.join(PARAMS_FILE), serde_json::to_string(&params)?)?;
    let rule = path.join(RULE_FILE);
    if artifact.site.position.is_rule() {
        fs::write(rule, serde_json::to_string_pretty(&artifact.site.position)?)?;
    } else if rule.exists() {
        fs::remove_file(rule)?;
    }
    Ok(())
}

/// Reads a bundle written by [`save_artifact`] and checks it is bound to `model`.
pub fn load_artifact(path: &Path, model: &TransformerModel) -> Result<AlignmentArtifact> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(path.join(META_FILE))?)?;
    if meta.version != ARTIFACT_VERSION {
        return Err(Error::Incompatible(format!(
            "artifact version {} (expected {ARTIFACT_VERSION})",
            meta.version
        )));
    }
    if meta.model_fingerprint != model.fingerprint() {
        return Err(Error::Incompatible(format!(
            "artifact is bound to model {:016x}, got {:016x}",
            meta.model_fingerprint,
            model.fingerprint()
        )));
    }
    let params: Params = serde_json::from_str(&fs::read_to_string(path.join(PARAMS_FILE))?)?;
    let featurizer = params.featurizer;
    if featurizer.kind != meta.kind {
        return Err(Error::Incompatible("kind in metadata and parameters differ".into()));
    }
    featurizer.validate()?;
    if let (Some(q), Some(inv)) = (&featurizer.rotation, &params.inverse) {
        let t = transpose(q, featurizer.width);
        if t.iter().zip(inv).any(|(a, b)| (a - b).abs() > 1e-12) || t.len() != inv.len() {
            return Err(Error::Incompatible("stored inverse is not the transpose of the rotation".into()));
        }
    }
    let rule = path.join(RULE_FILE);
    if rule.exists() {
        let p: PositionSelector = serde_json::from_str(&fs::read_to_string(rule)?)?;
        if p != meta.site.position {
            return Err(Error::Incompatible("position rule descriptor disagrees with the site".into()));
        }
    }
    meta.site.validate(model)?;
    meta.features.check_width(featurizer.width)?;
    Ok(AlignmentArtifact {
        featurizer,
        features: meta.features,
        site: meta.site,
        variable: meta.variable,
        model_fingerprint: meta.model_fingerprint,
        provenance: meta.provenance,
        faithfulness: meta.faithfulness,
    })
}
