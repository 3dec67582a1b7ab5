// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fast end-to-end sanity checks on the hand-wired fixtures.

use mib_core::autodiff::{finite_difference_check, Tape, Tensor, Var};
use mib_core::eval::{cmd, cpr, faithfulness, FaithfulnessCurve};
use mib_core::featurize::{faithfulness_score, AlignmentArtifact, InterventionSite, PairSet, PositionSelector};
use mib_core::graph::{Circuit, DEFAULT_GRID};
use mib_core::model::{build_ground_truth_model, AblationSpec, GroundTruthKind};
use mib_core::tasks::TaskId;

use crate::error::{CliError, CliResult};

type Check = (&'static str, fn() -> mib_core::Result<String>);

fn gradients() -> mib_core::Result<String> {
    let x0 = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4])?;
    let f = |t: &mut Tape, x: Var| {
        let n = t.layer_norm(x, 1e-5)?;
        let g = t.gelu(n)?;
        let s = t.softmax(g)?;
        let h = t.tanh(x)?;
        let p = t.mul(s, h)?;
        t.sum(p)
    };
    let r = finite_difference_check(f, &x0, 1e-6)?;
    if !r.passed {
        return Err(mib_core::Error::Degenerate(format!("relative deviation {:.2e}", r.max_rel_deviation)));
    }
    Ok(format!("relative deviation {:.2e}", r.max_rel_deviation))
}

fn copy_anchors() -> mib_core::Result<String> {
    let gt = build_ground_truth_model(GroundTruthKind::CopyHead, 0);
    let data = TaskId::Copy.generate(60, 0)?.public_test;
    let g = gt.model.graph().clone();
    let ab = AblationSpec::Counterfactual;
    let full = faithfulness(&gt.model, &Circuit::full(g.clone()), &data, &ab)?;
    let empty = faithfulness(&gt.model, &Circuit::empty(g.clone()), &data, &ab)?;
    let truth = Circuit::from_edges(g, gt.circuit.clone().unwrap_or_default())?;
    let planted = faithfulness(&gt.model, &truth, &data, &ab)?;
    if (full - 1.0).abs() > 1e-9 || empty.abs() > 1e-9 || planted < 0.99 {
        return Err(mib_core::Error::Degenerate(format!(
            "f(full) = {full}, f(empty) = {empty}, f(planted) = {planted}"
        )));
    }
    Ok(format!("f(full) = {full:.3}, f(empty) = {empty:.3}, f(planted) = {planted:.3}"))
}

fn identity_featurizer() -> mib_core::Result<String> {
    let gt = build_ground_truth_model(GroundTruthKind::PlantedDirection, 0);
    let data = TaskId::Planted.generate(200, 0)?;
    let pairs = PairSet::sample(&data.validation, &TaskId::Planted.causal_model(), "side", 200, 2)?;
    let n_layers = gt.model.config().n_layers;
    let site = InterventionSite::residual(n_layers, PositionSelector::Last);
    let a = AlignmentArtifact::full_vector(&gt.model, site, "side")?;
    let f = faithfulness_score(&gt.model, &a, &pairs)?;
    if f != 1.0 {
        return Err(mib_core::Error::Degenerate(format!("full-vector faithfulness {f} at {site}")));
    }
    Ok(format!("full-vector faithfulness {f:.3} at {site}"))
}

fn metric_degeneracies() -> mib_core::Result<String> {
    let n = DEFAULT_GRID.len();
    let ones = FaithfulnessCurve::from_values(&DEFAULT_GRID, &vec![1.0; n])?;
    let zeros = FaithfulnessCurve::from_values(&DEFAULT_GRID, &vec![0.0; n])?;
    let (c1, d1, c0, d0) = (cpr(&ones), cmd(&ones), cpr(&zeros), cmd(&zeros));
    if (c1 - 1.0).abs() > 1e-12 || d1.abs() > 1e-12 || c0.abs() > 1e-12 || (d0 - 1.0).abs() > 1e-12 {
        return Err(mib_core::Error::Degenerate(format!(
            "f = 1 gives CPR {c1}, CMD {d1}; f = 0 gives CPR {c0}, CMD {d0}"
        )));
    }
    Ok("f = 1 gives CPR 1, CMD 0; f = 0 gives CPR 0, CMD 1".into())
}

const CHECKS: [Check; 4] = [
    ("gradients", gradients),
    ("copy-head anchors", copy_anchors),
    ("identity featurizer", identity_featurizer),
    ("metric degeneracies", metric_degeneracies),
];

pub fn selfcheck() -> CliResult<()> {
    let mut failed = Vec::new();
    for (name, check) in CHECKS {
        match check() {
            Ok(msg) => println!("ok   {name}: {msg}"),
            Err(e) => {
                println!("FAIL {name}: {e}");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("selfcheck failed: {}", failed.join(", "))))
    }
}
