// SPDX-License-Identifier: MIT OR Apache-2.0

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::util::{rng, Fnv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
}

/// Every weight of the transformer, generic over storage (tensors or tape handles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub w_e: T,
    pub w_pos: T,
    pub layers: Vec<LayerParams<T>>,
    pub w_u: T,
}

pub type Weights = Params<Tensor>;
pub type WeightVars = Params<Var>;

impl<T> Params<T> {
    /// Visits every weight in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&'a T)) {
        f(&self.w_e);
        f(&self.w_pos);
        for l in &self.layers {
            for h in &l.heads {
                f(&h.w_q);
                f(&h.w_k);
                f(&h.w_v);
                f(&h.w_o);
            }
            f(&l.w_in);
            f(&l.b_in);
            f(&l.w_out);
            f(&l.b_out);
        }
        f(&self.w_u);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&'a mut T)) {
        f(&mut self.w_e);
        f(&mut self.w_pos);
        for l in &mut self.layers {
            for h in &mut l.heads {
                f(&mut h.w_q);
                f(&mut h.w_k);
                f(&mut h.w_v);
                f(&mut h.w_o);
            }
            f(&mut l.w_in);
            f(&mut l.b_in);
            f(&mut l.w_out);
            f(&mut l.b_out);
        }
        f(&mut self.w_u);
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Params<U>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let w_e = f(&self.w_e)?;
        let w_pos = f(&self.w_pos)?;
        for l in &self.layers {
            let mut heads = Vec::with_capacity(l.heads.len());
            for h in &l.heads {
                heads.push(HeadParams {
                    w_q: f(&h.w_q)?,
                    w_k: f(&h.w_k)?,
                    w_v: f(&h.w_v)?,
                    w_o: f(&h.w_o)?,
                });
            }
            layers.push(LayerParams {
                heads,
                w_in: f(&l.w_in)?,
                b_in: f(&l.b_in)?,
                w_out: f(&l.w_out)?,
                b_out: f(&l.b_out)?,
            });
        }
        Ok(Params {
            w_e,
            w_pos,
            layers,
            w_u: f(&self.w_u)?,
        })
    }

    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|t| out.push(t));
        out
    }
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dh, dm) = (cfg.d_model, cfg.d_head, cfg.d_mlp);
        let layer = || LayerParams {
            heads: (0..cfg.n_heads)
                .map(|_| HeadParams {
                    w_q: Tensor::zeros(&[d, dh]),
                    w_k: Tensor::zeros(&[d, dh]),
                    w_v: Tensor::zeros(&[d, dh]),
                    w_o: Tensor::zeros(&[dh, d]),
                })
                .collect(),
            w_in: Tensor::zeros(&[d, dm]),
            b_in: Tensor::zeros(&[dm]),
            w_out: Tensor::zeros(&[dm, d]),
            b_out: Tensor::zeros(&[d]),
        };
        Params {
            w_e: Tensor::zeros(&[cfg.vocab_size, d]),
            w_pos: Tensor::zeros(&[cfg.max_seq_len, d]),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            w_u: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    /// Gaussian initialization with fan-in scaling; biases start at zero.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut w = Self::zeros(cfg);
        let mut r = rng(cfg.seed);
        let mut fill = |t: &mut Tensor, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in t.data_mut() {
                *v = normal.sample(&mut r);
            }
        };
        fill(&mut w.w_e, 0.5);
        fill(&mut w.w_pos, 0.5);
        let fan = |t: &Tensor| 1.0 / (t.shape()[0] as f64).sqrt();
        for l in &mut w.layers {
            for h in &mut l.heads {
                for m in [&mut h.w_q, &mut h.w_k, &mut h.w_v, &mut h.w_o] {
                    let s = fan(m);
                    fill(m, s);
                }
            }
            let s = fan(&l.w_in);
            fill(&mut l.w_in, s);
            let s = fan(&l.w_out);
            fill(&mut l.w_out, s);
        }
        let s = fan(&w.w_u);
        fill(&mut w.w_u, s);
        w
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|t| n += t.numel());
        n
    }

    /// Stable hash of every weight bit, used to bind artifacts to a model.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        self.visit(|t| {
            for &s in t.shape() {
                h.u64(s as u64);
            }
            h.f64s(t.data());
        });
        h.finish()
    }

    /// Places every weight on the tape, as parameters or as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<WeightVars> {
        self.try_map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}
