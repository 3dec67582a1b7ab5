// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Activation, AttentionKind, ModelConfig, WeightVars, Weights};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, EdgeId, NodeId, NodeKind};

/// Interception points of a forward pass.
///
/// The default methods leave the computation untouched. Hooks may create new
/// tape values, so interventions stay differentiable.
pub trait Hooks {
    /// Contribution that edge `edge` delivers to its reader; `upstream` is the source node output.
    fn edge_input(&self, _tape: &mut Tape, _edge: EdgeId, upstream: Var) -> Result<Var> {
        Ok(upstream)
    }

    /// Pre-norm input of a reader after summing its edges.
    fn reader_input(&self, _tape: &mut Tape, _node: NodeId, input: Var) -> Result<Var> {
        Ok(input)
    }

    /// Output of a writer node before it is broadcast along outgoing edges.
    fn node_output(&self, _tape: &mut Tape, _node: NodeId, out: Var) -> Result<Var> {
        Ok(out)
    }
}

pub struct NoHooks;

impl Hooks for NoHooks {}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Per node: writer contributions `[T, d]`, and the logits `[T, V]` for the logits node.
    pub outputs: Vec<Var>,
    /// Pre-norm reader inputs (`None` for the embedding).
    pub inputs: Vec<Option<Var>>,
    /// Reader inputs after normalization.
    pub normed: Vec<Option<Var>>,
    pub logits: Var,
}

/// Per-node values of one clean forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationCache {
    pub tokens: Vec<usize>,
    /// Indexed by node id; writers hold `[T, d]` contributions, the logits node holds `[T, V]`.
    pub outputs: Vec<Tensor>,
    pub inputs: Vec<Option<Tensor>>,
    pub normed: Vec<Option<Tensor>>,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Contribution of `node` at position `pos`.
    pub fn contribution(&self, node: NodeId, pos: usize) -> &[f64] {
        self.outputs[node].row(pos)
    }

    /// Number of (node, position) contribution entries.
    pub fn n_entries(&self) -> usize {
        self.outputs.iter().map(Tensor::rows).sum()
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("cache has a logits node")
    }
}

/// Decoder-only transformer whose residual stream is split into per-node contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    weights: Weights,
    graph: Arc<ComputationGraph>,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let expected = Weights::zeros(&config);
        let mut shapes = Vec::new();
        expected.visit(|t| shapes.push(t.shape().to_vec()));
        let mut got = Vec::new();
        weights.visit(|t| got.push(t.shape().to_vec()));
        if shapes != got {
            return Err(Error::shape("model weights", "weights do not match the config"));
        }
        let mut finite = true;
        weights.visit(|t| finite &= t.is_finite());
        if !finite {
            return Err(Error::NonFinite { op: "model weights" });
        }
        let graph = Arc::new(ComputationGraph::transformer(
            config.n_layers,
            config.n_heads,
            config.d_model,
        ));
        Ok(Self {
            config,
            weights,
            graph,
        })
    }

    /// Randomly initialized model seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = Weights::init(&config);
        Self::new(config, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn graph(&self) -> &Arc<ComputationGraph> {
        &self.graph
    }

    pub fn fingerprint(&self) -> u64 {
        self.weights.fingerprint()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Full-sequence logits `[T, V]`; the last row is the final-position prediction.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let wv = self.weights.to_tape(&mut tape, false)?;
        let out = self.run(&mut tape, &wv, tokens, &NoHooks)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn forward_with_cache(&self, tokens: &[usize]) -> Result<(Tensor, ActivationCache)> {
        self.forward_hooked_cache(tokens, &NoHooks)
    }

    /// Like [`forward_with_cache`](Self::forward_with_cache) with interventions applied.
    pub fn forward_hooked_cache(&self, tokens: &[usize], hooks: &dyn Hooks) -> Result<(Tensor, ActivationCache)> {
        let mut tape = Tape::new();
        let wv = self.weights.to_tape(&mut tape, false)?;
        let out = self.run(&mut tape, &wv, tokens, hooks)?;
        let get = |v: &Option<Var>| v.map(|v| tape.value(v).clone());
        let cache = ActivationCache {
            tokens: tokens.to_vec(),
            outputs: out.outputs.iter().map(|&v| tape.value(v).clone()).collect(),
            inputs: out.inputs.iter().map(get).collect(),
            normed: out.normed.iter().map(get).collect(),
        };
        Ok((tape.value(out.logits).clone(), cache))
    }

    /// Recomputes the logits node from cached contributions.
    pub fn logits_from_cache(&self, cache: &ActivationCache) -> Result<Tensor> {
        let mut tape = Tape::new();
        let wv = self.weights.to_tape(&mut tape, false)?;
        let logits = self.graph.logits();
        let parts = self
            .graph
            .incoming(logits)
            .iter()
            .map(|&e| tape.constant(cache.outputs[self.graph.edge(e).src].clone()))
            .collect::<Result<Vec<_>>>()?;
        let input = tape.add_all(&parts)?;
        let (_, out) = self.node_forward(&mut tape, &wv, logits, input, None)?;
        Ok(tape.value(out).clone())
    }

    /// Records one forward pass on `tape`.
    pub fn run(&self, tape: &mut Tape, wv: &WeightVars, tokens: &[usize], hooks: &dyn Hooks) -> Result<RunOutput> {
        self.check_tokens(tokens)?;
        let g = &self.graph;
        let n = g.n_nodes();
        let mut outputs: Vec<Option<Var>> = vec![None; n];
        let mut inputs = vec![None; n];
        let mut normed = vec![None; n];

        let tok = tape.embed(wv.w_e, tokens)?;
        let pos = tape.slice_rows(wv.w_pos, 0, tokens.len())?;
        let z = tape.add(tok, pos)?;
        outputs[0] = Some(hooks.node_output(tape, 0, z)?);

        for v in 1..n {
            let mut parts = Vec::with_capacity(g.incoming(v).len());
            let mut raw = Vec::new();
            for &e in g.incoming(v) {
                let up = outputs[g.edge(e).src].expect("topological order");
                parts.push(hooks.edge_input(tape, e, up)?);
                raw.push(up);
            }
            let summed = tape.add_all(&parts)?;
            let mut input = hooks.reader_input(tape, v, summed)?;
            if parts.contains(&input) || raw.contains(&input) {
                // keep reader inputs distinct so their gradients are per reader
                input = tape.scale(input, 1.0)?;
            }
            let qk = if self.config.qk_from_residual && matches!(g.node(v), NodeKind::Head { .. }) {
                let s = tape.add_all(&raw)?;
                Some(hooks.reader_input(tape, v, s)?)
            } else {
                None
            };
            let (x, out) = self.node_forward(tape, wv, v, input, qk)?;
            inputs[v] = Some(input);
            normed[v] = Some(x);
            outputs[v] = Some(if v == g.logits() {
                out
            } else {
                hooks.node_output(tape, v, out)?
            });
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every node computed")).collect();
        let logits = *outputs.last().expect("logits node");
        Ok(RunOutput {
            outputs,
            inputs,
            normed,
            logits,
        })
    }

    fn normalize(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.config.layer_norm {
            tape.layer_norm(x, self.config.norm_epsilon)
        } else {
            Ok(x)
        }
    }

    /// Computes reader `node` from its pre-norm input; returns (normalized input, output).
    ///
    /// `qk_input` overrides the input used for queries and keys of a head.
    pub fn node_forward(
        &self,
        tape: &mut Tape,
        wv: &WeightVars,
        node: NodeId,
        input: Var,
        qk_input: Option<Var>,
    ) -> Result<(Var, Var)> {
        let x = self.normalize(tape, input)?;
        let out = match self.graph.node(node) {
            NodeKind::Embedding => return Err(Error::invalid("the embedding has no input")),
            NodeKind::Head { layer, head } => {
                let hp = &wv.layers[layer].heads[head];
                let t = tape.value(x).rows();
                let pattern = match self.config.attention {
                    AttentionKind::Softmax => {
                        let xq = match qk_input {
                            Some(q) => self.normalize(tape, q)?,
                            None => x,
                        };
                        let q = tape.matmul(xq, hp.w_q)?;
                        let k = tape.matmul(xq, hp.w_k)?;
                        let kt = tape.transpose(k)?;
                        let s = tape.matmul(q, kt)?;
                        let s = tape.scale(s, 1.0 / (self.config.d_head as f64).sqrt())?;
                        tape.causal_softmax(s)?
                    }
                    AttentionKind::Uniform => tape.constant(uniform_causal(t))?,
                };
                let v = tape.matmul(x, hp.w_v)?;
                let mixed = tape.matmul(pattern, v)?;
                tape.matmul(mixed, hp.w_o)?
            }
            NodeKind::Mlp { layer } => {
                let lp = &wv.layers[layer];
                let h = tape.matmul(x, lp.w_in)?;
                let h = tape.add_row(h, lp.b_in)?;
                let h = match self.config.activation {
                    Activation::Gelu => tape.gelu(h)?,
                    Activation::Identity => h,
                };
                let o = tape.matmul(h, lp.w_out)?;
                tape.add_row(o, lp.b_out)?
            }
            NodeKind::Logits => tape.matmul(x, wv.w_u)?,
        };
        Ok((x, out))
    }
}

/// Lower-triangular matrix whose row `r` averages positions `0..=r`.
fn uniform_causal(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for r in 0..t {
        let w = 1.0 / (r + 1) as f64;
        for v in &mut m.row_mut(r)[..=r] {
            *v = w;
        }
    }
    m
}

/// Final-position row of full-sequence logits.
pub fn final_logits(logits: &Tensor) -> &[f64] {
    logits.row(logits.rows() - 1)
}

/// Greedy next token at the final position; the lowest id wins ties.
pub fn argmax_final(logits: &Tensor) -> usize {
    let row = final_logits(logits);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `logit(y) - logit(y')` at the final position.
pub fn logit_diff(logits: &Tensor, y: usize, y_prime: usize) -> Result<f64> {
    let row = final_logits(logits);
    for t in [y, y_prime] {
        if t >= row.len() {
            return Err(Error::OutOfVocab {
                token: t,
                vocab: row.len(),
            });
        }
    }
    Ok(row[y] - row[y_prime])
}

/// Differentiable `logit(y) - logit(y')` at the final position.
pub fn logit_diff_var(tape: &mut Tape, logits: Var, y: usize, y_prime: usize) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (t, v) = (shape[0], shape[1]);
    for tok in [y, y_prime] {
        if tok >= v {
            return Err(Error::OutOfVocab { token: tok, vocab: v });
        }
    }
    let base = (t - 1) * v;
    let a = tape.gather(logits, &[base + y])?;
    let b = tape.gather(logits, &[base + y_prime])?;
    tape.sub(a, b)
}
