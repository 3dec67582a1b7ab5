// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mib_cli::commands::report::{aggregate, Mark, Tables};
use mib_cli::commands::{FeaturizeReport, RunReport};
use mib_core::eval::{FaithfulnessCurve, MetricReport};
use mib_core::graph::{write_boolean_submission, Circuit, CircuitSeries, DEFAULT_GRID};
use mib_core::model::{build_ground_truth_model, GroundTruthKind};

fn mib(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mib"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mib(dir, args);
    assert!(
        out.status.success(),
        "mib {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn unknown_method_lists_the_registry() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mib(tmp.path(), &["discover", "--ground-truth", "copy-head", "--method", "magic", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for m in mib_cli::config::METHODS {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn bad_inputs_exit_with_validation_status() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(mib(p, &["--jobs", "0", "selfcheck"]).status.code(), Some(2));
    assert_eq!(mib(p, &["discover", "--task", "ioi", "--model", "nope.json", "--out", "x"]).status.code(), Some(2));
    std::fs::write(p.join("bad.toml"), "[method]\nnmae = \"eap\"\n").unwrap();
    let out = mib(p, &["discover", "--config", "bad.toml", "--ground-truth", "copy-head", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nmae"), "{}", stderr(&out));
    let out = mib(p, &["discover", "--ground-truth", "copy-head", "--task", "ioi", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn selfcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["selfcheck"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("ok ")).count(), 4, "{out}");
}

#[test]
fn toy_ioi_pipeline_writes_one_score_file_and_nine_circuits() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["gen-data", "--task", "ioi", "--n", "120", "--out", "data"]);
    std::fs::write(
        p.join("train.toml"),
        "task = \"ioi\"\n[data]\npath = \"data/ioi.jsonl\"\n[model]\nsteps = 200\ntarget_accuracy = 0.0\n",
    )
    .unwrap();
    ok(p, &["train-model", "--config", "train.toml", "--out", "model"]);
    assert!(p.join("model/train_report.json").is_file());
    let common = ["--model", "model/model.json", "--task", "ioi", "--data", "data/ioi.jsonl"];
    let mut args = vec!["discover", "--method", "eap", "--out", "disc"];
    args.extend(common);
    let log = ok(p, &args);
    assert_eq!(log.lines().filter(|l| l.starts_with("k ")).count(), 9);

    let scores = files(&p.join("disc/scores/importances/model/ioi"));
    assert_eq!(scores.len(), 1);
    assert!(scores[0].ends_with("importances.json"));
    let circuits = files(&p.join("disc/circuits/binary/model/ioi"));
    assert_eq!(circuits.len(), 9);
    for k in DEFAULT_GRID {
        assert!(circuits.iter().any(|c| c.ends_with(format!("circuit_{k}.json"))));
    }

    // both representations evaluate to the same curve
    let mut a = vec!["eval-circuits", "--circuits", "disc/scores", "--out", "eval-s"];
    a.extend(common);
    ok(p, &a);
    let mut b = vec!["eval-circuits", "--circuits", "disc/circuits", "--out", "eval-b"];
    b.extend(common);
    ok(p, &b);
    assert_eq!(read_json(&p.join("eval-s/curve.json")), read_json(&p.join("eval-b/curve.json")));
    let report = read_json(&p.join("eval-b/report.json"));
    assert_eq!(report["kind"], "circuit");
    assert_eq!(report["metric"]["method"], "eap");
}

#[test]
fn missing_threshold_file_names_k() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["discover", "--ground-truth", "copy-head", "--out", "d"]);
    std::fs::remove_file(p.join("d/circuits/binary/copy-head/copy/circuit_0.02.json")).unwrap();
    let out = mib(p, &["eval-circuits", "--ground-truth", "copy-head", "--circuits", "d/circuits", "--out", "e"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("k = 0.02"), "{}", stderr(&out));
}

#[test]
fn full_model_circuits_score_cpr_one_and_cmd_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let gt = build_ground_truth_model(GroundTruthKind::CopyHead, 0);
    let series = CircuitSeries::constant(&DEFAULT_GRID, &Circuit::full(gt.model.graph().clone()));
    write_boolean_submission(&p.join("full"), "copy-head", "copy", &series, &serde_json::json!({})).unwrap();
    for ablation in ["cf", "mean"] {
        let out = format!("e-{ablation}");
        ok(
            p,
            &["eval-circuits", "--ground-truth", "copy-head", "--circuits", "full", "--label", "full", "--ablation", ablation, "--out", &out],
        );
        let r = read_json(&p.join(&out).join("report.json"));
        assert!((r["metric"]["cpr"].as_f64().unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(r["metric"]["cmd"].as_f64().unwrap(), 0.0);
        assert_eq!(r["metric"]["method"], "full");
    }
}

#[test]
fn hybrid_ensemble_logs_its_members() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let log = ok(p, &["discover", "--ground-truth", "copy-head", "--method", "hybrid-ens", "--out", "h"]);
    for m in ["eap", "eap-ig-inputs", "eap-ig-acts", "sequential"] {
        assert!(log.contains(&format!("member {m}:")), "{log}");
    }
    let members = files(&p.join("h/members"));
    assert_eq!(members.len(), 4);
    let report = read_json(&p.join("h/discover.json"));
    assert_eq!(report["method"], "hybrid-ens");
}

#[test]
fn manifest_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(p, &["discover", "--ground-truth", "copy-head", "--method", "eap-ig-acts", "--seed", "4", "--out", "a"]);
    let m = read_json(&p.join("a/manifest.json"));
    assert_eq!(m["command"], "discover");
    assert_eq!(m["rerun"], "mib discover --config config.toml --out <dir>");
    assert!(m["config"].get("output").is_none());
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "config.toml"));
    ok(p, &["discover", "--config", "a/config.toml", "--out", "b"]);
    for rel in ["manifest.json", "config.toml", "discover.json", "scores/importances/copy-head/copy/importances.json"] {
        assert_eq!(
            std::fs::read(p.join("a").join(rel)).unwrap(),
            std::fs::read(p.join("b").join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn planted_direction_is_localized_by_das() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let dir = build_ground_truth_model(GroundTruthKind::PlantedDirection, 0).direction.unwrap();
    let position = dir.position.to_string();
    let layer = dir.layer.to_string();
    let common = ["featurize", "--ground-truth", "planted-direction", "--dims", "1", "--position", &position, "--layers", &layer];
    let mut das = common.to_vec();
    das.extend(["--kind", "das", "--out", "das"]);
    ok(p, &das);
    let r: FeaturizeReport = serde_json::from_value(read_json(&p.join("das/featurize.json"))).unwrap();
    assert_eq!(r.method, "orthogonal");
    assert_eq!(r.variable, "side");
    assert!(r.best >= 0.99, "{}", r.best);
    assert!(p.join(format!("das/artifacts/layer{layer}")).is_dir());

    let mut id = common.to_vec();
    id.extend(["--kind", "identity", "--out", "id"]);
    ok(p, &id);
    let r: FeaturizeReport = serde_json::from_value(read_json(&p.join("id/featurize.json"))).unwrap();
    assert_eq!(r.method, "identity");
    assert!(r.guardrail.is_none());
}

#[test]
fn guardrail_failure_exits_with_status_four() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    // a negative margin no control run can meet
    std::fs::write(p.join("strict.toml"), "[featurize]\nkind = \"nonlinear-mlp\"\nsteps = 60\nmargin = -1.0\n").unwrap();
    let out = mib(p, &["featurize", "--config", "strict.toml", "--ground-truth", "xor", "--out", "f"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    // the report is still written before the guardrail verdict
    let r: FeaturizeReport = serde_json::from_value(read_json(&p.join("f/featurize.json"))).unwrap();
    assert!(!r.guardrail.unwrap().passed);
    let out = mib(p, &["featurize", "--config", "strict.toml", "--ground-truth", "xor", "--no-guardrail", "--out", "g"]);
    assert!(out.status.success());
}

fn circuit_report(dir: &Path, method: &str, model: &str, values: &[f64; 9], ablation: &str) {
    let mut curve = FaithfulnessCurve::from_values(&DEFAULT_GRID, values).unwrap();
    curve.ablation = ablation.into();
    let metric = MetricReport::new(method, model, "ioi", curve, None);
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("report.json"), serde_json::to_string(&RunReport::Circuit { metric }).unwrap()).unwrap();
}

fn featurize_report(dir: &Path, method: &str, mean: f64, best: f64) {
    let r = FeaturizeReport {
        method: method.into(),
        model: "m".into(),
        task: "planted".into(),
        variable: "side".into(),
        n_pairs: 10,
        layers: vec![],
        mean,
        best_layer: 0,
        best,
        guardrail: None,
    };
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("report.json"), serde_json::to_string(&RunReport::Featurize(r)).unwrap()).unwrap();
}

#[test]
fn report_marks_best_and_second_and_fills_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    circuit_report(&p.join("r1"), "eap", "a", &[1.0; 9], "cf");
    circuit_report(&p.join("r2"), "eap-ig-inputs", "a", &[0.5; 9], "cf");
    circuit_report(&p.join("r3"), "exact", "a", &[0.2; 9], "cf");
    circuit_report(&p.join("r4"), "exact", "b", &[0.3; 9], "cf");
    featurize_report(&p.join("f1"), "orthogonal", 0.61234, 0.9);
    featurize_report(&p.join("f2"), "mask", 0.4, 0.95);
    let out = ok(p, &["report", "r1", "r2", "r3", "r4", "f1", "f2", "--out", "tables"]);
    let text = std::fs::read_to_string(p.join("tables/tables.txt")).unwrap();
    assert_eq!(out, text);
    assert!(text.contains("**1.000**") && text.contains("_0.500_"), "{text}");
    // CMD is lower-is-better
    assert!(text.contains("**0.000**") && text.contains("_0.500_"));
    // eap has no run on model b
    let eap_row = text.lines().find(|l| l.starts_with("eap ")).unwrap();
    assert!(eap_row.trim_end().ends_with('-'), "{eap_row}");
    assert!(text.contains("**0.612 (0.900)**") && text.contains("_0.400 (0.950)_"), "{text}");

    // JSON cells equal the printed three-decimal numbers
    let tables: Tables = serde_json::from_value(read_json(&p.join("tables/tables.json"))).unwrap();
    let f = &tables.faithfulness.rows[0].cells[0].as_ref().unwrap();
    assert_eq!((f.value, f.best, f.mark), (0.612, Some(0.9), Some(Mark::Best)));
    for t in [&tables.cpr, &tables.cmd, &tables.faithfulness] {
        for row in &t.rows {
            for c in row.cells.iter().flatten() {
                let shown = format!("{:.3}", c.value);
                assert!(text.contains(&shown));
                assert_eq!(shown.parse::<f64>().unwrap(), c.value);
            }
        }
    }
    assert_eq!(read_json(&p.join("tables/manifest.json"))["rerun"], "mib report r1 r2 r3 r4 f1 f2 --out <dir>");
}

#[test]
fn report_rejects_conflicting_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    circuit_report(&p.join("cf"), "eap", "a", &[1.0; 9], "cf");
    circuit_report(&p.join("mean"), "exact", "a", &[0.5; 9], "mean");
    circuit_report(&p.join("dup"), "eap", "a", &[0.5; 9], "cf");
    let err = aggregate(&[p.join("cf"), p.join("mean")]).unwrap_err().to_string();
    assert!(err.contains("conflicting configs"), "{err}");
    let err = aggregate(&[p.join("cf"), p.join("dup")]).unwrap_err().to_string();
    assert!(err.contains("appears twice"), "{err}");
    let out = mib(p, &["report", "cf", "missing", "--out", "t"]);
    assert_eq!(out.status.code(), Some(2));
}
