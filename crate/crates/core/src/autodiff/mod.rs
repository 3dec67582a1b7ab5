// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the primitives the toy transformer and featurizer training need are
//! provided. Reductions sum left to right in row-major order so identical
//! inputs give bit-identical values and gradients.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::{finite_difference_check, GradCheckReport, FD_STEP};
pub use optim::{clip_grad_norm, Adam};
pub use tape::{gelu, sigmoid, OpKind, Tape, Var};
pub use tensor::{dot, Tensor};

/// LayerNorm epsilon used by every model in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;
