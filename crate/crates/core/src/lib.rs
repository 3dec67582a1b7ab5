// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale circuit and causal-variable localization.
//!
//! The crate bundles a small reverse-mode autodiff engine, a toy decoder-only
//! transformer whose residual stream is decomposed into per-component
//! contributions, synthetic tasks with fixed counterfactual pairings, and the
//! two evaluation tracks built on top of them:
//!
//! - circuit localization: edge scoring ([`attribution`]), budgeted selection
//!   ([`selection`]) and faithfulness/CPR/CMD scoring ([`eval`]);
//! - causal-variable localization: invertible featurizers trained with
//!   interchange interventions ([`featurize`]).

pub mod attribution;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod graph;
pub mod model;
pub mod selection;
pub mod tasks;
pub(crate) mod util;

pub use error::{Error, Result};
