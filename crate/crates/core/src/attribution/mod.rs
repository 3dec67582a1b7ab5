// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge and node scoring.
//!
//! Every method returns one signed score per edge; positive scores mean that
//! patching the edge raises the logit difference `m`.

mod bootstrap;
mod eap;
mod ensemble;
mod exact;
mod ipe;
mod prune;
mod scores;

pub use bootstrap::{bootstrap_filter, DEFAULT_CONSISTENCY, DEFAULT_RESAMPLES};
pub use eap::{
    eap_ig_acts_scores, eap_ig_inputs_scores, eap_scores, embedding_attributions, node_attribution_scores,
    DEFAULT_IG_STEPS,
};
pub use ensemble::{ensemble_hybrid, ensemble_parallel, HybridConfig, HybridReport, Merge};
pub use exact::{exact_edge_patch_scores, DEFAULT_PATCH_BUDGET};
pub use ipe::{ipe_edge_scores, isolate_path_effect, PathMode};
pub use prune::{ensemble_sequential, train_edge_mask, MaskedGraphParams, PruneConfig, PruneReport, SparsityPenalty};
pub use scores::{AttributionScores, NodeScores, Provenance};
