// SPDX-License-Identifier: MIT OR Apache-2.0

//! Arena tape recording primitive applications for reverse-mode differentiation.
//!
//! Every value produced during a forward pass lives in the tape's arena and is
//! addressed by a [`Var`] handle. Nodes are appended in evaluation order, so
//! the arena is already topologically sorted and [`Tape::backward`] simply
//! walks it in reverse.

use super::tensor::{dot, matmul_into, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds accepted by [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddRow,
    Sub,
    Mul,
    /// `[n, m] * [m]`, per-column factor broadcast over rows.
    MulRow,
    Scale(f64),
    /// Tensor times a one-element tensor.
    ScaleBy,
    Softmax,
    /// Softmax over the last axis with a lower-triangular (causal) mask.
    CausalSoftmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    Gelu,
    Tanh,
    /// Inverse hyperbolic tangent; inputs must lie in (-1, 1).
    Atanh,
    /// Elementwise `1 / x`.
    Reciprocal,
    Sin,
    Cos,
    Sigmoid,
    EmbedLookup(Vec<usize>),
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Concatenation of 2-D tensors along axis 0 (rows) or 1 (columns).
    Concat { axis: usize },
    Gather(Vec<usize>),
    Sum,
    Mean,
    CrossEntropyWithLogits(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MulRow => "mul_row",
            OpKind::Scale(_) => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::Softmax => "softmax",
            OpKind::CausalSoftmax => "causal_softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm { .. } => "layernorm",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::Atanh => "atanh",
            OpKind::Reciprocal => "reciprocal",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Sigmoid => "sigmoid",
            OpKind::EmbedLookup(_) => "embed_lookup",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Concat { .. } => "concat",
            OpKind::Gather(_) => "gather",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropyWithLogits(_) => "cross_entropy_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// `None` for leaves and for nodes that need no gradient.
    record: Option<Record>,
}

struct Record {
    kind: OpKind,
    inputs: Vec<Var>,
    /// Auxiliary buffer kept for the backward rule (normalized input, probabilities, ...).
    saved: Vec<f64>,
}

/// One tape per evaluation context; rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient will be tracked.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, None))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last backward pass, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient as a raw buffer; zeros when the node was not reached.
    pub fn grad_data(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    // ------------------------------------------------------------------
    // Convenience wrappers
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::AddRow, &[a, bias])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn mul_row(&mut self, a: Var, factor: Var) -> Result<Var> {
        self.apply(OpKind::MulRow, &[a, factor])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(OpKind::Scale(s), &[a])
    }
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.apply(OpKind::ScaleBy, &[a, s])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::CausalSoftmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps }, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn atanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Atanh, &[a])
    }
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Reciprocal, &[a])
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sin, &[a])
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Cos, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(OpKind::EmbedLookup(ids.to_vec()), &[table])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, len }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(OpKind::Gather(idx.to_vec()), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(OpKind::CrossEntropyWithLogits(targets.to_vec()), &[logits])
    }

    /// Sum of several same-shape tensors, accumulated left to right.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of nothing"))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    // ------------------------------------------------------------------
    // Forward
    // ------------------------------------------------------------------

    /// Applies one primitive and records it when any input requires a gradient.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        let arity_ok = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::AddRow
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MulRow
            | OpKind::ScaleBy => inputs.len() == 2,
            OpKind::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(name, format!("{} inputs", inputs.len())));
        }
        let (value, saved) = self.forward_value(&kind, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            kind,
            inputs: inputs.to_vec(),
            saved,
        });
        Ok(self.push(value, requires_grad, record))
    }

    fn shapes(&self, inputs: &[Var]) -> String {
        inputs
            .iter()
            .map(|v| format!("{:?}", self.nodes[v.0].value.shape()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn forward_value(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor, Vec<f64>)> {
        let name = kind.name();
        let bad = || Error::shape(name, self.shapes(inputs));
        let x = &self.nodes[inputs[0].0].value;
        let out = match kind {
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                (x.matmul(b).map_err(|_| bad())?, Vec::new())
            }
            OpKind::Transpose => (x.transpose().map_err(|_| bad())?, Vec::new()),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                if x.shape() != b.shape() {
                    return Err(bad());
                }
                let t = match kind {
                    OpKind::Add => x.zip_map(b, |p, q| p + q),
                    OpKind::Sub => x.zip_map(b, |p, q| p - q),
                    _ => x.zip_map(b, |p, q| p * q),
                }?;
                (t, Vec::new())
            }
            OpKind::AddRow | OpKind::MulRow => {
                let b = &self.nodes[inputs[1].0].value;
                if b.numel() != x.last_dim() {
                    return Err(bad());
                }
                let mut t = x.clone();
                let add = matches!(kind, OpKind::AddRow);
                for r in 0..t.rows() {
                    for (o, &bv) in t.row_mut(r).iter_mut().zip(b.data()) {
                        if add {
                            *o += bv;
                        } else {
                            *o *= bv;
                        }
                    }
                }
                (t, Vec::new())
            }
            OpKind::Scale(s) => (x.map(|v| v * s), Vec::new()),
            OpKind::ScaleBy => {
                let s = &self.nodes[inputs[1].0].value;
                if s.numel() != 1 {
                    return Err(bad());
                }
                let s = s.item();
                (x.map(|v| v * s), Vec::new())
            }
            OpKind::Softmax | OpKind::CausalSoftmax => {
                let causal = matches!(kind, OpKind::CausalSoftmax);
                let c = x.last_dim();
                if causal && (x.shape().len() != 2 || x.rows() != c) {
                    return Err(bad());
                }
                let mut t = x.clone();
                for r in 0..t.rows() {
                    let limit = if causal { r + 1 } else { c };
                    softmax_in_place(&mut t.row_mut(r)[..limit]);
                    for v in &mut t.row_mut(r)[limit..] {
                        *v = 0.0;
                    }
                }
                (t, Vec::new())
            }
            OpKind::LogSoftmax => {
                let mut t = x.clone();
                for r in 0..t.rows() {
                    let row = t.row_mut(r);
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z = row.iter().fold(0.0, |s, &v| s + (v - m).exp());
                    let lse = m + z.ln();
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                (t, Vec::new())
            }
            OpKind::LayerNorm { eps } => {
                let c = x.last_dim();
                let mut t = x.clone();
                let mut inv_std = Vec::with_capacity(t.rows());
                for r in 0..t.rows() {
                    let row = t.row_mut(r);
                    let mean = row.iter().fold(0.0, |s, &v| s + v) / c as f64;
                    let var = row.iter().fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / c as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * is;
                    }
                    inv_std.push(is);
                }
                (t, inv_std)
            }
            OpKind::Gelu => (x.map(gelu), Vec::new()),
            OpKind::Tanh => (x.map(f64::tanh), Vec::new()),
            OpKind::Atanh => (x.map(f64::atanh), Vec::new()),
            OpKind::Reciprocal => (x.map(f64::recip), Vec::new()),
            OpKind::Sin => (x.map(f64::sin), Vec::new()),
            OpKind::Cos => (x.map(f64::cos), Vec::new()),
            OpKind::Sigmoid => (x.map(sigmoid), Vec::new()),
            OpKind::EmbedLookup(ids) => {
                if x.shape().len() != 2 {
                    return Err(bad());
                }
                let (vocab, d) = (x.shape()[0], x.shape()[1]);
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= vocab {
                        return Err(Error::OutOfVocab { token: id, vocab });
                    }
                    data.extend_from_slice(x.row(id));
                }
                (Tensor::new(vec![ids.len(), d], data)?, Vec::new())
            }
            OpKind::SliceRows { start, len } => {
                if x.shape().len() != 2 || start + len > x.shape()[0] {
                    return Err(bad());
                }
                let c = x.shape()[1];
                let data = x.data()[start * c..(start + len) * c].to_vec();
                (Tensor::new(vec![*len, c], data)?, Vec::new())
            }
            OpKind::SliceCols { start, len } => {
                if x.shape().len() != 2 || start + len > x.shape()[1] {
                    return Err(bad());
                }
                let mut data = Vec::with_capacity(x.shape()[0] * len);
                for r in 0..x.shape()[0] {
                    data.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                (Tensor::new(vec![x.shape()[0], *len], data)?, Vec::new())
            }
            OpKind::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                if parts.iter().any(|p| p.shape().len() != 2) || *axis > 1 {
                    return Err(bad());
                }
                if *axis == 0 {
                    let c = parts[0].shape()[1];
                    if parts.iter().any(|p| p.shape()[1] != c) {
                        return Err(bad());
                    }
                    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
                    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
                    (Tensor::new(vec![rows, c], data)?, Vec::new())
                } else {
                    let r = parts[0].shape()[0];
                    if parts.iter().any(|p| p.shape()[0] != r) {
                        return Err(bad());
                    }
                    let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
                    let mut data = Vec::with_capacity(r * cols);
                    for i in 0..r {
                        for p in &parts {
                            data.extend_from_slice(p.row(i));
                        }
                    }
                    (Tensor::new(vec![r, cols], data)?, Vec::new())
                }
            }
            OpKind::Gather(idx) => {
                if idx.iter().any(|&i| i >= x.numel()) {
                    return Err(bad());
                }
                let data = idx.iter().map(|&i| x.data()[i]).collect();
                (Tensor::new(vec![idx.len()], data)?, Vec::new())
            }
            OpKind::Sum => (
                Tensor::scalar(x.data().iter().fold(0.0, |s, &v| s + v)),
                Vec::new(),
            ),
            OpKind::Mean => {
                if x.numel() == 0 {
                    return Err(bad());
                }
                let s = x.data().iter().fold(0.0, |s, &v| s + v);
                (Tensor::scalar(s / x.numel() as f64), Vec::new())
            }
            OpKind::CrossEntropyWithLogits(targets) => {
                let c = x.last_dim();
                if targets.len() != x.rows() || targets.is_empty() {
                    return Err(bad());
                }
                if let Some(&t) = targets.iter().find(|&&t| t >= c) {
                    return Err(Error::OutOfVocab { token: t, vocab: c });
                }
                let mut probs = x.data().to_vec();
                let mut loss = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut probs[r * c..(r + 1) * c];
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z = row.iter().fold(0.0, |s, &v| s + (v - m).exp());
                    let lse = m + z.ln();
                    loss += lse - row[t];
                    for v in row.iter_mut() {
                        *v = (*v - lse).exp();
                    }
                }
                (Tensor::scalar(loss / targets.len() as f64), probs)
            }
        };
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        self.backward_with_seed(loss, &Tensor::filled(self.nodes[loss.0].value.shape(), 1.0))
    }

    /// Reverse pass from an arbitrary node with an explicit output gradient.
    pub fn backward_with_seed(&mut self, root: Var, seed: &Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if seed.numel() != self.nodes[root.0].value.numel() {
            return Err(Error::shape("backward", "seed does not match root"));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(seed.data().to_vec());
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if let Some(rec) = &self.nodes[i].record {
                let contributions = self.local_grads(i, rec, &g)?;
                for (input, contrib) in rec.inputs.iter().zip(contributions) {
                    if let Some(c) = contrib {
                        if self.nodes[input.0].requires_grad {
                            accumulate(&mut self.grads[input.0], c);
                        }
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, rec: &Record, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |k: usize| self.nodes[rec.inputs[k].0].requires_grad;
        let res = match &rec.kind {
            OpKind::MatMul => {
                let a = val(rec.inputs[0]);
                let b = val(rec.inputs[1]);
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| {
                    let bt = b.transpose().expect("2-D");
                    let mut ga = vec![0.0; n * k];
                    matmul_into(g, bt.data(), &mut ga, n, m, k);
                    ga
                });
                let gb = needs(1).then(|| {
                    let at = a.transpose().expect("2-D");
                    let mut gb = vec![0.0; k * m];
                    matmul_into(at.data(), g, &mut gb, k, n, m);
                    gb
                });
                vec![ga, gb]
            }
            OpKind::Transpose => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        ga[c * n + r] = g[r * m + c];
                    }
                }
                vec![Some(ga)]
            }
            OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            OpKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            OpKind::Mul => {
                let a = val(rec.inputs[0]).data();
                let b = val(rec.inputs[1]).data();
                vec![
                    needs(0).then(|| g.iter().zip(b).map(|(x, y)| x * y).collect()),
                    needs(1).then(|| g.iter().zip(a).map(|(x, y)| x * y).collect()),
                ]
            }
            OpKind::AddRow => {
                let c = out.last_dim();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            OpKind::MulRow => {
                let a = val(rec.inputs[0]);
                let f = val(rec.inputs[1]).data();
                let c = out.last_dim();
                let ga = needs(0).then(|| {
                    g.chunks(c)
                        .flat_map(|row| row.iter().zip(f).map(|(x, y)| x * y))
                        .collect()
                });
                let gf = needs(1).then(|| {
                    let mut gf = vec![0.0; c];
                    for (grow, arow) in g.chunks(c).zip(a.data().chunks(c)) {
                        for j in 0..c {
                            gf[j] += grow[j] * arow[j];
                        }
                    }
                    gf
                });
                vec![ga, gf]
            }
            OpKind::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
            OpKind::ScaleBy => {
                let a = val(rec.inputs[0]).data();
                let s = val(rec.inputs[1]).item();
                vec![
                    needs(0).then(|| g.iter().map(|v| v * s).collect()),
                    needs(1).then(|| vec![dot(g, a)]),
                ]
            }
            OpKind::Softmax | OpKind::CausalSoftmax => {
                let c = out.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s = dot(gr, yr);
                    for j in 0..c {
                        or[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(ga)]
            }
            OpKind::LogSoftmax => {
                let c = out.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s = gr.iter().fold(0.0, |a, &b| a + b);
                    for j in 0..c {
                        or[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                vec![Some(ga)]
            }
            OpKind::LayerNorm { .. } => {
                let c = out.last_dim();
                let cf = c as f64;
                let mut ga = vec![0.0; g.len()];
                for (r, ((gr, xh), or)) in g
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(ga.chunks_mut(c))
                    .enumerate()
                {
                    let is = rec.saved[r];
                    let mg = gr.iter().fold(0.0, |a, &b| a + b) / cf;
                    let mgx = dot(gr, xh) / cf;
                    for j in 0..c {
                        or[j] = is * (gr[j] - mg - xh[j] * mgx);
                    }
                }
                vec![Some(ga)]
            }
            OpKind::Gelu => {
                let x = val(rec.inputs[0]).data();
                vec![Some(g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect())]
            }
            OpKind::Tanh => vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
            )],
            OpKind::Atanh => {
                let x = val(rec.inputs[0]).data();
                vec![Some(g.iter().zip(x).map(|(gv, xv)| gv / (1.0 - xv * xv)).collect())]
            }
            OpKind::Reciprocal => vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(gv, y)| -gv * y * y)
                    .collect(),
            )],
            OpKind::Sin => {
                let x = val(rec.inputs[0]).data();
                vec![Some(g.iter().zip(x).map(|(gv, xv)| gv * xv.cos()).collect())]
            }
            OpKind::Cos => {
                let x = val(rec.inputs[0]).data();
                vec![Some(g.iter().zip(x).map(|(gv, xv)| -gv * xv.sin()).collect())]
            }
            OpKind::Sigmoid => vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect(),
            )],
            OpKind::EmbedLookup(ids) => {
                let table = val(rec.inputs[0]);
                let d = table.shape()[1];
                let mut gt = vec![0.0; table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                vec![Some(gt)]
            }
            OpKind::SliceRows { start, .. } => {
                let x = val(rec.inputs[0]);
                let c = x.shape()[1];
                let mut ga = vec![0.0; x.numel()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                vec![Some(ga)]
            }
            OpKind::SliceCols { start, len } => {
                let x = val(rec.inputs[0]);
                let c = x.shape()[1];
                let mut ga = vec![0.0; x.numel()];
                for r in 0..x.shape()[0] {
                    ga[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(ga)]
            }
            OpKind::Concat { axis } => {
                let parts: Vec<&Tensor> = rec.inputs.iter().map(|&v| val(v)).collect();
                if *axis == 0 {
                    let mut off = 0;
                    parts
                        .iter()
                        .map(|p| {
                            let s = g[off..off + p.numel()].to_vec();
                            off += p.numel();
                            Some(s)
                        })
                        .collect()
                } else {
                    let total = out.shape()[1];
                    let mut col = 0;
                    parts
                        .iter()
                        .map(|p| {
                            let w = p.shape()[1];
                            let mut s = Vec::with_capacity(p.numel());
                            for r in 0..p.shape()[0] {
                                s.extend_from_slice(&g[r * total + col..r * total + col + w]);
                            }
                            col += w;
                            Some(s)
                        })
                        .collect()
                }
            }
            OpKind::Gather(idx) => {
                let mut ga = vec![0.0; val(rec.inputs[0]).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
                vec![Some(ga)]
            }
            OpKind::Sum => vec![Some(vec![g[0]; val(rec.inputs[0]).numel()])],
            OpKind::Mean => {
                let n = val(rec.inputs[0]).numel();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            OpKind::CrossEntropyWithLogits(targets) => {
                let c = val(rec.inputs[0]).last_dim();
                let scale = g[0] / targets.len() as f64;
                let mut ga: Vec<f64> = rec.saved.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    ga[r * c + t] -= scale;
                }
                vec![Some(ga)]
            }
        };
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Tanh approximation of GeLU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_of_zero_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4])).unwrap();
        let y = t.gelu(x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_of_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0)).unwrap();
        let y = t.tanh(x).unwrap();
        assert_eq!(t.value(y).item(), 0.0);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.5])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x * w) consumed twice vs once
        let w = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let single = {
            let mut t = Tape::new();
            let x = t.param(x0.clone()).unwrap();
            let wv = t.constant(w.clone()).unwrap();
            let p = t.mul(x, wv).unwrap();
            let s = t.sum(p).unwrap();
            t.backward(s).unwrap();
            t.grad(x).unwrap()
        };
        let double = {
            let mut t = Tape::new();
            let x = t.param(x0).unwrap();
            let wv = t.constant(w).unwrap();
            let p1 = t.mul(x, wv).unwrap();
            let p2 = t.mul(x, wv).unwrap();
            let q = t.add(p1, p2).unwrap();
            let s = t.sum(q).unwrap();
            t.backward(s).unwrap();
            t.grad(x).unwrap()
        };
        for (a, b) in single.data().iter().zip(double.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_record_nothing() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0])).unwrap();
        let b = t.tanh(a).unwrap();
        assert!(!t.requires_grad(b));
        assert!(t.nodes[b.0].record.is_none());
    }

    #[test]
    fn atanh_reciprocal_and_trig_gradients() {
        let x0 = Tensor::vector(vec![-0.7, 0.1, 0.55]);
        let f = |t: &mut Tape, x: Var| {
            let a = t.atanh(x)?;
            let r = t.scale(x, 3.0)?;
            let r = t.reciprocal(r)?;
            let p = t.mul(a, r)?;
            let s = t.sin(x)?;
            let c = t.cos(p)?;
            let q = t.mul(s, c)?;
            let p = t.add(p, q)?;
            t.sum(p)
        };
        let report = crate::autodiff::finite_difference_check(f, &x0, 1e-6).unwrap();
        assert!(report.passed, "{}", report.max_rel_deviation);
    }

    #[test]
    fn atanh_outside_the_open_interval_is_non_finite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(t.atanh(x), Err(Error::NonFinite { op: "atanh" })));
    }
}
