// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;

use mib_core::attribution::{eap_scores, AttributionScores, Provenance};
use mib_core::eval::{
    circuit_m, cmd, cpr, curve, dataset_m, faithfulness, ground_truth_auroc, log_trapezoid_weights, metric_m,
    render_table, FaithfulnessCurve, MetricReport,
};
use mib_core::graph::{Circuit, CircuitSeries, DEFAULT_GRID};
use mib_core::model::{build_ground_truth_model, AblationSpec, GroundTruthKind, ModelConfig, TransformerModel, Weights};
use mib_core::tasks::{gen_copy, TaskId};
use mib_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(task: TaskId, layers: usize, seed: u64) -> TransformerModel {
    let data = task.generate(8, 0).unwrap();
    let mut cfg = ModelConfig::new(layers, 2, 4, task.vocab().len(), data.train[0].tokens.len());
    cfg.seed = seed;
    TransformerModel::init(cfg).unwrap()
}

#[test]
fn uniform_model_has_zero_metric() {
    let data = gen_copy(10, 0).unwrap();
    let cfg = ModelConfig::new(1, 2, 4, TaskId::Copy.vocab().len(), 3);
    let m = TransformerModel::new(cfg.clone(), Weights::zeros(&cfg)).unwrap();
    for inst in &data.train {
        assert_eq!(metric_m(&m, inst, None).unwrap(), 0.0);
    }
    let err = faithfulness(&m, &Circuit::full(m.graph().clone()), &data.train, &AblationSpec::Counterfactual);
    assert!(matches!(err, Err(Error::Degenerate(_))));
}

#[test]
fn anchors_are_exact() {
    for task in [TaskId::Copy, TaskId::Ioi, TaskId::ArithmeticAdd, TaskId::Mcqa] {
        let data = task.generate(12, 1).unwrap().train;
        for layers in 1..=2 {
            let m = random_model(task, layers, 7 + layers as u64);
            for ab in [AblationSpec::Counterfactual, AblationSpec::mean_over(&m, &data).unwrap()] {
                let g = m.graph().clone();
                assert_eq!(faithfulness(&m, &Circuit::full(g.clone()), &data, &ab).unwrap(), 1.0);
                assert_eq!(faithfulness(&m, &Circuit::empty(g), &data, &ab).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn full_neuron_subsets_change_nothing() {
    let data = TaskId::Copy.generate(6, 0).unwrap().train;
    let m = random_model(TaskId::Copy, 1, 3);
    let g = m.graph().clone();
    let plain = Circuit::from_edges(g.clone(), [0, 1, 4]).unwrap();
    let src = g.edge(0).src;
    let all: BTreeSet<usize> = (0..g.d_model()).collect();
    let with = plain.clone().with_neurons(src, all).unwrap();
    let ab = AblationSpec::Counterfactual;
    let a = circuit_m(&m, &plain, &data, &ab).unwrap();
    let b = circuit_m(&m, &with, &data, &ab).unwrap();
    assert!((a - b).abs() < 1e-12);
    let none = plain.with_neurons(src, BTreeSet::new()).unwrap();
    let dropped = Circuit::from_edges(g, [4]).unwrap();
    let c = circuit_m(&m, &none, &data, &ab).unwrap();
    let d = circuit_m(&m, &dropped, &data, &ab).unwrap();
    assert!((c - d).abs() < 1e-12);
}

#[test]
fn score_circuits_need_thresholding() {
    let m = random_model(TaskId::Copy, 1, 0);
    let data = TaskId::Copy.generate(4, 0).unwrap().train;
    let c = Circuit::from_scores(m.graph().clone(), vec![0.5; m.graph().n_edges()]).unwrap();
    assert!(circuit_m(&m, &c, &data, &AblationSpec::Counterfactual).is_err());
}

#[test]
fn constant_series_give_constant_curves() {
    let m = random_model(TaskId::Copy, 2, 4);
    let data = TaskId::Copy.generate(8, 0).unwrap().train;
    let g = m.graph().clone();
    let ab = AblationSpec::Counterfactual;
    let full = curve(&m, &CircuitSeries::constant(&DEFAULT_GRID, &Circuit::full(g.clone())), &data, &ab).unwrap();
    assert_eq!(full.values(), vec![1.0; 9]);
    assert!((cpr(&full) - 1.0).abs() <= 1e-12);
    assert_eq!(cmd(&full), 0.0);
    let empty = curve(&m, &CircuitSeries::constant(&DEFAULT_GRID, &Circuit::empty(g.clone())), &data, &ab).unwrap();
    assert_eq!(empty.values(), vec![0.0; 9]);
    let mid = Circuit::from_edges(g, [0, 2, 5]).unwrap();
    let series = CircuitSeries::constant(&DEFAULT_GRID, &mid);
    assert_eq!(curve(&m, &series, &data, &ab).unwrap(), curve(&m, &series, &data, &ab).unwrap());
}

#[test]
fn degenerate_curves() {
    let one = FaithfulnessCurve::from_values(&DEFAULT_GRID, &[1.0; 9]).unwrap();
    assert!((cpr(&one) - 1.0).abs() <= 1e-12);
    assert_eq!(cmd(&one), 0.0);
    let zero = FaithfulnessCurve::from_values(&DEFAULT_GRID, &[0.0; 9]).unwrap();
    assert_eq!(cpr(&zero), 0.0);
    assert!((cmd(&zero) - 1.0).abs() <= 1e-12);
    let over = FaithfulnessCurve::from_values(&DEFAULT_GRID, &[1.5; 9]).unwrap();
    assert!((cmd(&over) - 0.5).abs() <= 1e-12);
}

#[test]
fn step_curve_matches_interval_areas() {
    let x: Vec<f64> = DEFAULT_GRID.iter().map(|k| k.log10()).collect();
    let mid = (x[0] + x[8]) / 2.0;
    let f: Vec<f64> = x.iter().map(|&v| if v >= mid { 1.0 } else { 0.0 }).collect();
    // trapezoid rule interval by interval
    let area: f64 = (0..8).map(|i| (f[i] + f[i + 1]) / 2.0 * (x[i + 1] - x[i])).sum();
    let expected = area / (x[8] - x[0]);
    let c = cpr(&FaithfulnessCurve::from_values(&DEFAULT_GRID, &f).unwrap());
    assert!((c - expected).abs() < 1e-12);
    // the exact step integral is 0.5; the gap is bounded by the straddling interval
    let straddle = (0..8).find(|&i| x[i] < mid && x[i + 1] >= mid).unwrap();
    assert!((c - 0.5).abs() <= (x[straddle + 1] - x[straddle]) / (x[8] - x[0]));
}

#[test]
fn curve_validation() {
    assert!(FaithfulnessCurve::from_values(&[], &[]).is_err());
    assert!(FaithfulnessCurve::from_values(&[0.1, 0.1], &[0.0, 1.0]).is_err());
    assert!(FaithfulnessCurve::from_values(&[0.1, 0.2], &[0.0, f64::NAN]).is_err());
    assert_eq!(log_trapezoid_weights(&[0.3]).unwrap(), vec![1.0]);
}

proptest! {
    #[test]
    fn weights_sum_to_one(mut grid in prop::collection::btree_set(1u32..100_000, 1..12)) {
        let g: Vec<f64> = std::mem::take(&mut grid).into_iter().map(|v| v as f64 / 100_000.0).collect();
        let w = log_trapezoid_weights(&g).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cpr_is_monotone(h in prop::collection::vec(-1.0..2.0f64, 9), bump in prop::collection::vec(0.0..1.0f64, 9)) {
        let g: Vec<f64> = h.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let ch = FaithfulnessCurve::from_values(&DEFAULT_GRID, &h).unwrap();
        let cg = FaithfulnessCurve::from_values(&DEFAULT_GRID, &g).unwrap();
        prop_assert!(cpr(&cg) >= cpr(&ch) - 1e-12);
        prop_assert!(cmd(&ch) >= 0.0);
    }

    #[test]
    fn cmd_zero_iff_constant_one(f in prop::collection::vec(prop_oneof![Just(1.0), 0.0..2.0f64], 9)) {
        let c = FaithfulnessCurve::from_values(&DEFAULT_GRID, &f).unwrap();
        prop_assert_eq!(cmd(&c) == 0.0, f.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn auroc_extremes_and_chance() {
    let m = random_model(TaskId::Copy, 1, 0);
    let g = m.graph().clone();
    let n = g.n_edges();
    let mut v = vec![0.1; n];
    v[2] = -5.0;
    v[4] = 3.0;
    let s = AttributionScores::new(g.clone(), v, Provenance::named("t")).unwrap();
    assert_eq!(ground_truth_auroc(&s, &[2, 4]).unwrap(), 1.0);
    // both members tie with five of the seven others and lose to two
    assert_eq!(ground_truth_auroc(&s, &[0, 1]).unwrap(), 2.5 / 7.0);
    assert!(ground_truth_auroc(&s, &[]).is_err());
    assert!(ground_truth_auroc(&s, &(0..n).collect::<Vec<_>>()).is_err());

    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0.0;
    for _ in 0..100 {
        let v = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let s = AttributionScores::new(g.clone(), v, Provenance::named("r")).unwrap();
        total += ground_truth_auroc(&s, &[0, 3, 5]).unwrap();
    }
    assert!((total / 100.0 - 0.5).abs() <= 0.05);
}

#[test]
fn copy_head_circuit_is_faithful() {
    let gt = build_ground_truth_model(GroundTruthKind::CopyHead, 0);
    let data = gen_copy(60, 0).unwrap().public_test;
    let truth = gt.circuit.clone().unwrap();
    let c = Circuit::from_edges(gt.model.graph().clone(), truth.clone()).unwrap();
    let ab = AblationSpec::Counterfactual;
    assert!(faithfulness(&gt.model, &c, &data, &ab).unwrap() >= 0.99);
    let cv = curve(&gt.model, &CircuitSeries::constant(&DEFAULT_GRID, &c), &data, &ab).unwrap();
    assert!(cmd(&cv) <= 0.01);
    let eap = eap_scores(&gt.model, &data, &ab).unwrap();
    assert_eq!(ground_truth_auroc(&eap, &truth).unwrap(), 1.0);
}

#[test]
fn trained_ioi_metric_and_role_swap() {
    let (m, data) = common::toy_ioi();
    let test = &data.public_test;
    let positive = test.iter().filter(|i| metric_m(m, i, None).unwrap() > 0.0).count();
    assert!(positive as f64 >= 0.9 * test.len() as f64);
    let clean = dataset_m(m, test).unwrap();
    // m under the counterfactual run, still measured as logit(y) - logit(y')
    let swapped: f64 = test
        .iter()
        .map(|i| {
            let l = m.forward(&i.cf_tokens).unwrap();
            mib_core::model::logit_diff(&l, i.answer, i.cf_answer).unwrap()
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!(swapped < 0.0);
    assert!((swapped + clean).abs() <= 0.25 * clean, "clean {clean} swapped {swapped}");
}

#[test]
fn table_lists_methods_by_pair() {
    let c = FaithfulnessCurve::from_values(&DEFAULT_GRID, &[0.5; 9]).unwrap();
    let reports = vec![
        MetricReport::new("eap", "toy", "ioi", c.clone(), Some(1.0)),
        MetricReport::new("eap-ig-inputs", "toy", "ioi", c.clone(), None),
        MetricReport::new("eap", "toy", "mcqa", c, None),
    ];
    let t = render_table(&reports);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("toy/ioi CPR / CMD") && lines[0].contains("toy/mcqa CPR / CMD"));
    assert!(lines[2].starts_with("eap ") && lines[2].contains("0.500 / 0.500") && lines[2].ends_with("1.000"));
    assert!(lines[3].contains(" - "));
}
