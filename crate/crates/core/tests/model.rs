// SPDX-License-Identifier: MIT OR Apache-2.0

use mib_core::autodiff::{finite_difference_check, Tape, Tensor, Var};
use mib_core::graph::NodeKind;
use mib_core::model::{
    accuracy, argmax_final, build_ground_truth_model, logit_diff, logit_diff_var, train_toy_model, AblationKind,
    AblationSpec, GroundTruthKind, Hooks, ModelConfig, PatchPlan, TrainConfig, TransformerModel, Weights,
};
use mib_core::tasks::{gen_copy, gen_planted, TaskId, COPY_NAMES};
use mib_core::Error;

fn small(layers: usize, seed: u64) -> TransformerModel {
    let mut cfg = ModelConfig::new(layers, 2, 4, 11, 6);
    cfg.seed = seed;
    TransformerModel::init(cfg).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn residual_additivity() {
    for layers in 1..=3 {
        let m = small(layers, layers as u64);
        let (_, cache) = m.forward_with_cache(&[1, 5, 3, 7]).unwrap();
        let g = m.graph();
        for v in 1..g.n_nodes() {
            let input = cache.inputs[v].as_ref().unwrap();
            for t in 0..4 {
                for i in 0..g.d_model() {
                    let sum: f64 = g.incoming(v).iter().map(|&e| cache.contribution(g.edge(e).src, t)[i]).sum();
                    assert!((input.row(t)[i] - sum).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn cache_counts_and_replay() {
    let m = small(2, 3);
    let (logits, cache) = m.forward_with_cache(&[0, 1, 2]).unwrap();
    assert_eq!(cache.n_entries(), m.graph().n_nodes() * 3);
    assert_eq!(m.logits_from_cache(&cache).unwrap(), logits);
}

#[test]
fn zero_weights_give_uniform_logits() {
    let cfg = ModelConfig::new(1, 2, 4, 9, 4);
    let m = TransformerModel::new(cfg.clone(), Weights::zeros(&cfg)).unwrap();
    let logits = m.forward(&[1, 2, 3]).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn out_of_vocab_rejected() {
    let m = small(1, 0);
    assert!(matches!(m.forward(&[0, 11]), Err(Error::OutOfVocab { token: 11, .. })));
    assert!(m.forward(&[0; 7]).is_err());
}

#[test]
fn empty_plan_and_self_patch_are_identity() {
    let m = small(2, 4);
    let tokens = [3, 1, 4, 1, 5];
    let (clean, cache) = m.forward_with_cache(&tokens).unwrap();
    assert_eq!(m.forward_with_patches(&tokens, &PatchPlan::new(AblationKind::Counterfactual)).unwrap(), clean);
    for e in [0, 7, m.graph().n_edges() - 1] {
        let plan = PatchPlan::from_source(&m, AblationKind::Counterfactual, [e], &cache.outputs).unwrap();
        assert_eq!(m.forward_with_patches(&tokens, &plan).unwrap(), clean);
    }
}

#[test]
fn full_patch_matches_counterfactual_run() {
    let m = small(2, 5);
    let (x, xp) = ([3, 1, 4, 1, 5], [2, 7, 1, 8, 2]);
    let (cf_logits, cf_cache) = m.forward_with_cache(&xp).unwrap();
    let all = vec![true; m.graph().n_edges()];
    let patched = m.forward_with_edge_mask(&x, &all, &cf_cache.outputs).unwrap();
    assert!(close(&patched, &cf_logits, 1e-6));
}

#[test]
fn unknown_edge_in_plan_rejected() {
    let m = small(1, 0);
    let mut plan = PatchPlan::new(AblationKind::Counterfactual);
    plan.insert(m.graph().n_edges(), 0, vec![0.0; 8]);
    assert!(matches!(m.forward_with_patches(&[1, 2], &plan), Err(Error::UnknownEdge(_))));
}

#[test]
fn patch_locality() {
    let m = small(2, 6);
    let g = m.graph().clone();
    let (x, xp) = ([3, 1, 4, 1], [2, 7, 1, 8]);
    let (_, clean) = m.forward_with_cache(&x).unwrap();
    let (_, cf) = m.forward_with_cache(&xp).unwrap();
    let mlp0 = g.node_id(NodeKind::Mlp { layer: 0 }).unwrap();
    let e = g.find_edge(NodeKind::Embedding, NodeKind::Mlp { layer: 0 }).unwrap();
    let plan = PatchPlan::from_source(&m, AblationKind::Counterfactual, [e], &cf.outputs).unwrap();
    let (logits, patched) = m.forward_with_patches_cache(&x, &plan).unwrap();
    assert_ne!(&logits, clean.logits());
    assert_ne!(patched.outputs[mlp0], clean.outputs[mlp0]);
    // upstream nodes and the sibling readers of the embedding are untouched
    for v in 0..mlp0 {
        assert_eq!(patched.outputs[v], clean.outputs[v]);
        assert_eq!(patched.inputs[v], clean.inputs[v]);
    }
}

#[test]
fn copy_head_predicts_the_unrepeated_name() {
    let gt = build_ground_truth_model(GroundTruthKind::CopyHead, 0);
    assert_eq!(gt.task, TaskId::Copy);
    let n = COPY_NAMES.len();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let logits = gt.model.forward(&[a, b, a]).unwrap();
                assert_eq!(argmax_final(&logits), b);
            }
        }
    }
    let w = gt.model.weights();
    assert!(w.layers[0].heads[1].w_o.data().iter().all(|&v| v == 0.0));
    assert!(w.layers[0].w_out.data().iter().all(|&v| v == 0.0));
}

fn metric_with_mask(m: &TransformerModel, data: &[mib_core::tasks::TaskInstance], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for inst in data {
        let (_, cf) = m.forward_with_cache(&inst.cf_tokens).unwrap();
        let l = m.forward_with_edge_mask(&inst.tokens, mask, &cf.outputs).unwrap();
        total += logit_diff(&l, inst.answer, inst.cf_answer).unwrap();
    }
    total / data.len() as f64
}

#[test]
fn copy_head_ground_truth_separation() {
    let gt = build_ground_truth_model(GroundTruthKind::CopyHead, 0);
    let m = &gt.model;
    let data = gen_copy(200, 1).unwrap().public_test;
    let n = m.graph().n_edges();
    let full = metric_with_mask(m, &data, &vec![false; n]);
    let empty = metric_with_mask(m, &data, &vec![true; n]);
    let range = (full - empty).abs();
    assert!(range > 1.0);
    let circuit = gt.circuit.clone().unwrap();
    let outside: Vec<bool> = (0..n).map(|e| !circuit.contains(&e)).collect();
    assert!((metric_with_mask(m, &data, &outside) - full).abs() < 0.01 * range);
    for &e in &circuit {
        let mut mask = vec![false; n];
        mask[e] = true;
        assert!((metric_with_mask(m, &data, &mask) - full).abs() > 0.1 * range);
    }
    // distractor head and MLP have no causal effect
    let g = m.graph();
    for node in [NodeKind::Head { layer: 0, head: 1 }, NodeKind::Mlp { layer: 0 }] {
        let id = g.node_id(node).unwrap();
        let mut mask = vec![false; n];
        for &e in g.outgoing(id) {
            mask[e] = true;
        }
        assert_eq!(metric_with_mask(m, &data, &mask), full);
    }
}

/// Swaps the component of the layer-1 residual along `u` with the counterfactual's.
fn planted_interchange(m: &TransformerModel, u: &[f64], base: &[usize], source: &[usize]) -> usize {
    let (_, cb) = m.forward_with_cache(base).unwrap();
    let (_, cs) = m.forward_with_cache(source).unwrap();
    let g = m.graph();
    let logits = g.logits();
    let t = base.len() - 1;
    let hb = cb.inputs[logits].as_ref().unwrap().row(t).to_vec();
    let hs = cs.inputs[logits].as_ref().unwrap().row(t).to_vec();
    let coef: f64 = u.iter().zip(hs.iter().zip(&hb)).map(|(u, (s, b))| u * (s - b)).sum();
    let mut plan = PatchPlan::new(AblationKind::Counterfactual);
    let e = g.find_edge(NodeKind::Embedding, NodeKind::Logits).unwrap();
    let row: Vec<f64> = cb.contribution(0, t).iter().zip(u).map(|(z, u)| z + coef * u).collect();
    plan.insert(e, t, row);
    argmax_final(&m.forward_with_patches(base, &plan).unwrap())
}

#[test]
fn planted_direction_interchange_flips_output() {
    for kind in [GroundTruthKind::PlantedDirection, GroundTruthKind::PlantedAxis] {
        let gt = build_ground_truth_model(kind, 3);
        let dir = gt.direction.clone().unwrap();
        let norm: f64 = dir.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let data = gen_planted(100, 2).unwrap().train;
        assert_eq!(accuracy(&gt.model, &data).unwrap(), 1.0);
        for inst in &data {
            let got = planted_interchange(&gt.model, &dir.vector, &inst.tokens, &inst.cf_tokens);
            assert_eq!(got, inst.cf_answer);
        }
    }
}

struct ReplaceEmbedding(Var);

impl Hooks for ReplaceEmbedding {
    fn node_output(&self, _tape: &mut Tape, node: usize, out: Var) -> mib_core::Result<Var> {
        Ok(if node == 0 { self.0 } else { out })
    }
}

#[test]
fn metric_gradient_matches_finite_differences() {
    let m = small(2, 9);
    let tokens = [1, 2, 3, 4];
    let (_, cache) = m.forward_with_cache(&tokens).unwrap();
    let f = |tape: &mut Tape, z: Var| {
        let wv = m.weights().to_tape(tape, false)?;
        let out = m.run(tape, &wv, &tokens, &ReplaceEmbedding(z))?;
        logit_diff_var(tape, out.logits, 3, 5)
    };
    let report = finite_difference_check(f, &cache.outputs[0], 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_learning_rate_keeps_initial_accuracy() {
    let mut cfg = ModelConfig::new(1, 2, 4, COPY_NAMES.len(), 3);
    cfg.seed = 11;
    let data = gen_copy(40, 0).unwrap();
    let tc = TrainConfig {
        steps: 3,
        batch_size: 4,
        lr: 0.0,
        target_accuracy: None,
        ..TrainConfig::default()
    };
    let (m, report) = train_toy_model(cfg.clone(), &data.train, &data.validation, &tc).unwrap();
    let init = TransformerModel::init(cfg).unwrap();
    assert_eq!(m.weights(), init.weights());
    assert_eq!(report.validation_accuracy, accuracy(&init, &data.validation).unwrap());
}

#[test]
fn training_is_deterministic_and_learns_copy() {
    let mut cfg = ModelConfig::new(1, 2, 8, COPY_NAMES.len(), 3);
    cfg.seed = 1;
    let data = gen_copy(400, 0).unwrap();
    let tc = TrainConfig {
        steps: 400,
        batch_size: 16,
        lr: 1e-2,
        target_accuracy: Some(0.95),
        eval_every: 50,
        ..TrainConfig::default()
    };
    let (a, ra) = train_toy_model(cfg.clone(), &data.train, &data.validation, &tc).unwrap();
    let (b, _) = train_toy_model(cfg, &data.train, &data.validation, &tc).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert!(ra.validation_accuracy >= 0.95);
}

#[test]
fn checkpoint_round_trip() {
    let m = small(2, 12);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    m.save(&p).unwrap();
    let back = TransformerModel::load(&p).unwrap();
    assert_eq!(back, m);
    let text = std::fs::read_to_string(&p).unwrap().replace("\"version\":1", "\"version\":9");
    std::fs::write(&p, text).unwrap();
    assert!(matches!(TransformerModel::load(&p), Err(Error::Incompatible(_))));
}

#[test]
fn mean_ablation_source_is_position_resolved() {
    let m = small(1, 13);
    let data = gen_copy(20, 0).unwrap().train;
    let cfg_vocab_ok = data.iter().all(|i| i.tokens.iter().all(|&t| t < 11));
    assert!(cfg_vocab_ok);
    let spec = AblationSpec::mean_over(&m, &data).unwrap();
    let src = spec.source(&m, &data[0]).unwrap();
    assert_eq!(src.len(), m.graph().n_nodes());
    assert_eq!(src[0].shape(), &[3, 8]);
}
