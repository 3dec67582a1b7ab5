// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-wired models whose circuit or causal direction is known by construction.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Activation, AttentionKind, ModelConfig, TransformerModel, Weights};
use crate::autodiff::{Tensor, LAYER_NORM_EPS};
use crate::graph::{EdgeId, NodeKind};
use crate::tasks::{TaskId, COPY_NAMES, PLANTED_FILLERS, XOR_NOISE_VARIANTS};
use crate::tasks::fixtures::{planted, xor};
use crate::util::{rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundTruthKind {
    /// One head copies the non-repeated name; everything else is inert.
    CopyHead,
    /// A random unit direction after layer 0 carries the side variable.
    PlantedDirection,
    /// As `PlantedDirection` with the direction on a standard basis axis.
    PlantedAxis,
    /// A variable encoded as an XOR pattern over two directions.
    Xor,
}

/// Direction in the residual stream that mediates a causal variable.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownDirection {
    pub variable: String,
    pub vector: Vec<f64>,
    /// Residual stream before layer `layer` (`n_layers` is the final residual).
    pub layer: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub kind: GroundTruthKind,
    pub task: TaskId,
    pub model: TransformerModel,
    /// Edges of the known circuit, if any.
    pub circuit: Option<Vec<EdgeId>>,
    pub direction: Option<KnownDirection>,
}

pub fn build_ground_truth_model(kind: GroundTruthKind, seed: u64) -> GroundTruthModel {
    match kind {
        GroundTruthKind::CopyHead => copy_head(seed),
        GroundTruthKind::PlantedDirection => planted_direction(seed, false),
        GroundTruthKind::PlantedAxis => planted_direction(seed, true),
        GroundTruthKind::Xor => xor_fixture(seed),
    }
}

fn config(n_heads: usize, d_head: usize, d_mlp: usize, vocab: usize, seq: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads,
        d_model: n_heads * d_head,
        d_head,
        d_mlp,
        vocab_size: vocab,
        max_seq_len: seq,
        norm_epsilon: LAYER_NORM_EPS,
        seed,
        layer_norm: false,
        activation: Activation::Gelu,
        attention: AttentionKind::Softmax,
        qk_from_residual: false,
    }
}

fn gaussian(t: &mut Tensor, r: &mut Rng, std: f64) {
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(r);
        *v = std * z;
    }
}

fn set(t: &mut Tensor, i: usize, j: usize, v: f64) {
    let c = t.last_dim();
    t.data_mut()[i * c + j] = v;
}

/// Adds `scale * a b^T` to a 2-D tensor.
fn add_outer(t: &mut Tensor, a: &[f64], b: &[f64], scale: f64) {
    let c = t.last_dim();
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            t.data_mut()[i * c + j] += scale * x * y;
        }
    }
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Columns of a random orthogonal matrix, or the standard basis when `identity`.
fn orthonormal_basis(d: usize, r: &mut Rng, identity: bool) -> Vec<Vec<f64>> {
    if identity {
        return (0..d).map(|i| unit(d, i)).collect();
    }
    let m = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(r));
    let q = m.qr().q();
    (0..d).map(|j| q.column(j).iter().copied().collect()).collect()
}

fn copy_head(seed: u64) -> GroundTruthModel {
    const BETA: f64 = 4.0;
    const READOUT: f64 = 4.0;
    let n = COPY_NAMES.len();
    let cfg = config(2, 8, 8, n, 4, seed);
    let d = cfg.d_model;
    let (pos0, out0) = (n, n + 4);
    let mut w = Weights::zeros(&cfg);
    let mut r = rng(seed);
    for t in 0..n {
        set(&mut w.w_e, t, t, 1.0);
    }
    for p in 0..cfg.max_seq_len {
        set(&mut w.w_pos, p, pos0 + p, 1.0);
    }
    let dh_scale = (cfg.d_head as f64).sqrt();
    {
        let h = &mut w.layers[0].heads[0];
        for t in 0..n {
            // matching tokens score -BETA, others 0: attend away from the query's own name
            set(&mut h.w_q, t, t, -BETA * dh_scale);
            set(&mut h.w_k, t, t, 1.0);
            set(&mut h.w_v, t, t, 1.0);
            set(&mut h.w_o, t, out0 + t, 1.0);
        }
    }
    {
        let h = &mut w.layers[0].heads[1];
        gaussian(&mut h.w_q, &mut r, 0.5);
        gaussian(&mut h.w_k, &mut r, 0.5);
        gaussian(&mut h.w_v, &mut r, 0.5);
    }
    gaussian(&mut w.layers[0].w_in, &mut r, 0.5);
    gaussian(&mut w.layers[0].b_in, &mut r, 0.5);
    for t in 0..n {
        set(&mut w.w_u, out0 + t, t, READOUT);
    }
    debug_assert_eq!(d, 16);
    let model = TransformerModel::new(cfg, w).expect("fixture weights match the config");
    let g = model.graph();
    let circuit = vec![
        g.find_edge(NodeKind::Embedding, NodeKind::Head { layer: 0, head: 0 }).expect("edge"),
        g.find_edge(NodeKind::Head { layer: 0, head: 0 }, NodeKind::Logits).expect("edge"),
    ];
    GroundTruthModel {
        kind: GroundTruthKind::CopyHead,
        task: TaskId::Copy,
        model,
        circuit: Some(circuit),
        direction: None,
    }
}

fn planted_direction(seed: u64, axis: bool) -> GroundTruthModel {
    const BETA: f64 = 12.0;
    const SIGNAL: f64 = 2.0;
    const NOISE: f64 = 3.0;
    const READOUT: f64 = 2.5;
    let cfg = config(4, 8, 8, planted::VOCAB, planted::SEQ_LEN, seed);
    let d = cfg.d_model;
    let mut r = rng(seed);
    let basis = orthonormal_basis(d, &mut r, axis);
    let u = basis[0].clone();
    let pos = |p: usize| &basis[1 + p];
    let tok = |t: usize| &basis[1 + planted::SEQ_LEN + t];
    let noise_dims = &basis[1 + planted::SEQ_LEN + planted::VOCAB..];
    let noise_vec = |r: &mut Rng| {
        let mut v = vec![0.0; d];
        for b in noise_dims {
            let z: f64 = StandardNormal.sample(r);
            v.iter_mut().zip(b).for_each(|(x, y)| *x += z * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= NOISE / norm);
        v
    };

    let mut w = Weights::zeros(&cfg);
    for t in 0..planted::VOCAB {
        w.w_e.row_mut(t).copy_from_slice(tok(t));
    }
    for p in 0..planted::SEQ_LEN {
        w.w_pos.row_mut(p).copy_from_slice(pos(p));
    }
    let dh = cfg.d_head;
    let q_scale = BETA * (dh as f64).sqrt();
    let last = planted::SEQ_LEN - 1;
    let e0 = unit(dh, 0);
    {
        let h = &mut w.layers[0].heads[0];
        add_outer(&mut h.w_q, pos(last), &e0, q_scale);
        add_outer(&mut h.w_k, pos(0), &e0, 1.0);
        add_outer(&mut h.w_v, tok(planted::LEFT), &e0, 1.0);
        add_outer(&mut h.w_v, tok(planted::RIGHT), &e0, -1.0);
        add_outer(&mut h.w_o, &e0, &u, SIGNAL);
    }
    // two heads move filler identity into directions orthogonal to u
    for (head, src) in [(1, 1), (2, 2)] {
        let noise: Vec<Vec<f64>> = (0..PLANTED_FILLERS).map(|_| noise_vec(&mut r)).collect();
        let h = &mut w.layers[0].heads[head];
        add_outer(&mut h.w_q, pos(last), &e0, q_scale);
        add_outer(&mut h.w_k, pos(src), &e0, 1.0);
        for (i, n) in noise.iter().enumerate() {
            let ei = unit(dh, i);
            add_outer(&mut h.w_v, tok(planted::FILLER0 + i), &ei, 1.0);
            add_outer(&mut h.w_o, &ei, n, 1.0);
        }
    }
    for (i, &x) in u.iter().enumerate() {
        set(&mut w.w_u, i, planted::OUT_LEFT, READOUT * x);
        set(&mut w.w_u, i, planted::OUT_RIGHT, -READOUT * x);
    }
    let model = TransformerModel::new(cfg, w).expect("fixture weights match the config");
    GroundTruthModel {
        kind: if axis {
            GroundTruthKind::PlantedAxis
        } else {
            GroundTruthKind::PlantedDirection
        },
        task: TaskId::Planted,
        model,
        circuit: None,
        direction: Some(KnownDirection {
            variable: "side".into(),
            vector: u,
            layer: 1,
            position: last,
        }),
    }
}

fn xor_fixture(seed: u64) -> GroundTruthModel {
    const GAIN: f64 = 2.0;
    const NOISE: f64 = 1.0;
    const READOUT: f64 = 3.0;
    let cfg = config(2, 8, 4, xor::VOCAB, xor::SEQ_LEN, seed);
    let d = cfg.d_model;
    let mut r = rng(seed);
    let basis = orthonormal_basis(d, &mut r, false);
    let (u1, u2, u3) = (&basis[0], &basis[1], &basis[2]);
    let pos = |p: usize| &basis[3 + p];
    let noise_dims = &basis[3 + xor::SEQ_LEN..];
    let noise_vec = |r: &mut Rng| {
        let mut v = vec![0.0; d];
        for b in noise_dims {
            let z: f64 = StandardNormal.sample(r);
            v.iter_mut().zip(b).for_each(|(x, y)| *x += z * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= NOISE / norm);
        v
    };

    let mut w = Weights::zeros(&cfg);
    let bos = noise_vec(&mut r);
    w.w_e.row_mut(xor::BOS).copy_from_slice(&bos);
    for a in 0..2 {
        for b in 0..2 {
            let (sa, sb) = (2.0 * a as f64 - 1.0, 2.0 * b as f64 - 1.0);
            for f in 0..XOR_NOISE_VARIANTS {
                let n = noise_vec(&mut r);
                // u1 holds whether the bits agree, u2 holds b: bit a is an XOR pattern over the two
                let row: Vec<f64> = (0..d).map(|i| sa * sb * u1[i] + sb * u2[i] + n[i]).collect();
                w.w_e.row_mut(xor::token(a, b, f)).copy_from_slice(&row);
            }
        }
    }
    for p in 0..xor::SEQ_LEN {
        w.w_pos.row_mut(p).copy_from_slice(pos(p));
    }
    {
        // GeLU(gz) - GeLU(-gz) = gz, so the MLP writes the agreement sign onto u3
        let l = &mut w.layers[0];
        add_outer(&mut l.w_in, u1, &unit(4, 0), GAIN);
        add_outer(&mut l.w_in, u1, &unit(4, 1), -GAIN);
        add_outer(&mut l.w_out, &unit(4, 0), u3, 1.0 / GAIN);
        add_outer(&mut l.w_out, &unit(4, 1), u3, -1.0 / GAIN);
    }
    for (i, &x) in u3.iter().enumerate() {
        set(&mut w.w_u, i, xor::SAME, READOUT * x);
        set(&mut w.w_u, i, xor::DIFF, -READOUT * x);
    }
    let model = TransformerModel::new(cfg, w).expect("fixture weights match the config");
    GroundTruthModel {
        kind: GroundTruthKind::Xor,
        task: TaskId::Xor,
        model,
        circuit: None,
        direction: None,
    }
}
