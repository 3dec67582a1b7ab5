// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::autodiff::LAYER_NORM_EPS;
use crate::error::{Error, Result};

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Attention pattern computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Causal softmax over scaled query-key scores.
    #[default]
    Softmax,
    /// Fixed causal average over all earlier positions; makes heads linear in their input.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_epsilon: f64,
    pub seed: u64,
    /// Normalize reader inputs; off gives a purely additive residual stream.
    #[serde(default = "yes")]
    pub layer_norm: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub attention: AttentionKind,
    /// Queries and keys read the unpatched residual; only values see patched edges.
    #[serde(default)]
    pub qk_from_residual: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Standard pre-norm GeLU model.
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        let d_model = n_heads * d_head;
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head,
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len,
            norm_epsilon: LAYER_NORM_EPS,
            seed: 0,
            layer_norm: true,
            activation: Activation::Gelu,
            attention: AttentionKind::Softmax,
            qk_from_residual: false,
        }
    }

    /// Same shape with every nonlinearity on the edge paths removed.
    pub fn linearized(mut self) -> Self {
        self.layer_norm = false;
        self.activation = Activation::Identity;
        self.attention = AttentionKind::Uniform;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_heads == 0 || self.d_head == 0 || self.d_mlp == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::invalid("norm_epsilon must be positive"));
        }
        Ok(())
    }
}
