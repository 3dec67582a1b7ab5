// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer with a decomposed residual stream.
//!
//! Every reader (attention head, MLP, logits) receives the sum of the
//! contributions of all earlier writers, one per graph edge, so any single
//! edge can be patched without touching the others.

mod checkpoint;
mod config;
mod forward;
mod ground_truth;
mod params;
mod patch;
mod train;

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Activation, AttentionKind, ModelConfig};
pub use forward::{
    argmax_final, final_logits, logit_diff, logit_diff_var, ActivationCache, Hooks, NoHooks, RunOutput,
    TransformerModel,
};
pub use ground_truth::{build_ground_truth_model, GroundTruthKind, GroundTruthModel, KnownDirection};
pub use params::{HeadParams, LayerParams, Params, WeightVars, Weights};
pub use patch::{AblationKind, AblationSpec, PatchPlan};
pub use train::{accuracy, train_toy_model, TrainConfig, TrainReport};

