// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal-variable localization: invertible featurizers at a model site,
//! interchange interventions on chosen feature coordinates, and the
//! training loops that fit them.
//!
//! A featurizer maps a site vector `h` (a row of width `d`) to features
//! `x = h Q`, optionally followed by a coupling layer. Interventions replace
//! the coordinates `Π` of the base features with those of the source and map
//! the result back.

mod artifact;
mod featurizer;
mod guardrail;
mod intervene;
mod pca;
mod site;
mod train;

pub use artifact::{load_artifact, save_artifact, AlignmentArtifact, RecordedFaithfulness, TrainingProvenance, ARTIFACT_VERSION};
pub use featurizer::{Coupling, FeatureIndices, Featurizer, FeaturizerKind};
pub use guardrail::{control_guardrail, GuardrailReport, GUARDRAIL_MARGIN};
pub use intervene::{faithfulness_score, interchange_intervene, interchange_logits, patch_site, InterchangePair, PairSet};
pub use pca::{fit_pca, pca_basis, reconstruction_error, PcaBasis};
pub use site::{capture, InterventionSite, PositionSelector, SiteComponent};
pub use train::{
    train_das, train_dbm, train_nonlinear, train_tanh_orthogonal, FeaturizeConfig, TrainableFeaturizer,
};
