// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_final, ModelConfig, NoHooks, TransformerModel};
use crate::autodiff::{clip_grad_norm, Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::tasks::TaskInstance;
use crate::util::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validation accuracy to reach; training stops early once it is met.
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 3e-3,
            clip_norm: Some(1.0),
            target_accuracy: Some(0.9),
            eval_every: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    /// (step, batch loss, validation accuracy) at every evaluation point.
    pub history: Vec<(usize, f64, f64)>,
}

/// Fraction of instances whose greedy final-position token is the answer.
pub fn accuracy(model: &TransformerModel, data: &[TaskInstance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let hits = data
        .par_iter()
        .map(|inst| Ok(usize::from(argmax_final(&model.forward(&inst.tokens)?) == inst.answer)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Both the prompt and its counterfactual are used as supervised examples.
fn examples(data: &[TaskInstance]) -> Vec<(&[usize], usize)> {
    data.iter()
        .flat_map(|i| [(i.tokens.as_slice(), i.answer), (i.cf_tokens.as_slice(), i.cf_answer)])
        .collect()
}

/// Final-position cross-entropy and its weight gradients for one example.
fn example_grad(model: &TransformerModel, tokens: &[usize], target: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let wv = model.weights().to_tape(&mut tape, true)?;
    let out = model.run(&mut tape, &wv, tokens, &NoHooks)?;
    let last = tape.slice_rows(out.logits, tokens.len() - 1, 1)?;
    let loss = tape.cross_entropy(last, &[target])?;
    tape.backward(loss)?;
    let grads = wv.flat().into_iter().map(|&v| tape.grad_data(v)).collect();
    Ok((tape.value(loss).item(), grads))
}

/// Trains a fresh model on next-token prediction of the answer token.
///
/// Per-example gradients may be computed in parallel; they are summed in
/// example order so results do not depend on the worker count.
pub fn train_toy_model(
    config: ModelConfig,
    train: &[TaskInstance],
    validation: &[TaskInstance],
    tc: &TrainConfig,
) -> Result<(TransformerModel, TrainReport)> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    if tc.batch_size == 0 || tc.eval_every == 0 {
        return Err(Error::invalid("batch_size and eval_every must be positive"));
    }
    let mut model = TransformerModel::init(config)?;
    let ex = examples(train);
    let mut opt = Adam::new(tc.lr);
    let mut r = rng(tc.seed);
    let mut history = Vec::new();
    let mut last_loss = f64::NAN;
    let mut steps_run = 0;
    let mut val_acc = accuracy(&model, validation)?;

    for step in 0..tc.steps {
        let batch: Vec<usize> = (0..tc.batch_size).map(|_| r.random_range(0..ex.len())).collect();
        let results = batch
            .par_iter()
            .map(|&i| example_grad(&model, ex[i].0, ex[i].1))
            .collect::<Vec<_>>();
        let mut total: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        for res in results {
            let (l, g) = res.map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    step,
                    what: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(t) => {
                    for (a, b) in t.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let bs = tc.batch_size as f64;
        loss /= bs;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "loss is not finite".into(),
            });
        }
        let mut grads = total.expect("non-empty batch");
        grads.iter_mut().flatten().for_each(|g| *g /= bs);
        if let Some(c) = tc.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let mut params: Vec<&mut Tensor> = Vec::new();
        model.weights_mut().visit_mut(|t| params.push(t));
        opt.step(&mut params, &grads)?;
        last_loss = loss;
        steps_run = step + 1;

        if steps_run % tc.eval_every == 0 || steps_run == tc.steps {
            val_acc = accuracy(&model, validation)?;
            history.push((steps_run, loss, val_acc));
            if tc.target_accuracy.is_some_and(|t| val_acc >= t) {
                break;
            }
        }
    }

    let train_acc = accuracy(&model, train)?;
    let report = TrainReport {
        steps_run,
        final_loss: last_loss,
        train_accuracy: train_acc,
        validation_accuracy: val_acc,
        history,
    };
    if let Some(target) = tc.target_accuracy {
        if val_acc < target {
            return Err(Error::TargetNotMet {
                target,
                train: train_acc,
                validation: val_acc,
            });
        }
    }
    Ok((model, report))
}
