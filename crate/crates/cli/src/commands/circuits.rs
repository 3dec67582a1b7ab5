// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use mib_core::attribution::{
    bootstrap_filter, eap_ig_acts_scores, eap_ig_inputs_scores, eap_scores, ensemble_hybrid, ensemble_parallel,
    ensemble_sequential, exact_edge_patch_scores, ipe_edge_scores, node_attribution_scores, AttributionScores,
    HybridConfig, Merge, PathMode, PruneConfig, SparsityPenalty, DEFAULT_PATCH_BUDGET,
};
use mib_core::eval::{curve, ground_truth_auroc, render_table, MetricReport};
use mib_core::graph::{
    circuits_from_scores, parse_circuit, read_submission, serialize_scores, write_boolean_submission,
    write_score_submission, CircuitSeries, RankBy, Submission,
};
use mib_core::model::AblationSpec;
use mib_core::selection::{select_ilp, select_pnr, IlpConfig, SelectionProblem};
use mib_core::tasks::TaskInstance;
use serde_json::json;

use super::RunReport;
use crate::config::{MethodConfig, RunConfig};
use crate::context::{fingerprint_of, load, Loaded};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, write_manifest};

pub const SCORES_DIR: &str = "scores";
pub const CIRCUITS_DIR: &str = "circuits";

fn prune_config(m: &MethodConfig) -> PruneConfig {
    PruneConfig {
        steps: m.prune_steps,
        lr: m.prune_lr,
        penalty: SparsityPenalty::Lagrangian { weight: m.prune_weight },
        ..PruneConfig::default()
    }
}

fn prune_subset<'a>(m: &MethodConfig, data: &'a [TaskInstance]) -> &'a [TaskInstance] {
    &data[..m.prune_instances.clamp(1, data.len())]
}

/// Scores of one registered method; ensembles also return their members.
fn score(
    l: &Loaded,
    m: &MethodConfig,
    data: &[TaskInstance],
    ablation: &AblationSpec,
) -> mib_core::Result<(AttributionScores, Vec<AttributionScores>)> {
    let model = &l.model;
    let single = |s: AttributionScores| Ok((s, Vec::new()));
    match m.name.as_str() {
        "eap" => single(eap_scores(model, data, ablation)?),
        "eap-ig-inputs" => single(eap_ig_inputs_scores(model, data, ablation, m.ig_steps)?),
        "eap-ig-acts" => single(eap_ig_acts_scores(model, data, ablation, m.ig_steps)?),
        "exact" => single(exact_edge_patch_scores(model, data, ablation, DEFAULT_PATCH_BUDGET)?),
        "ipe" => single(ipe_edge_scores(model, data, PathMode::Counterfactual, m.path_limit)?),
        "nap" => single(node_attribution_scores(model, data, ablation, None)?.broadcast()?),
        "nap-ig" => single(node_attribution_scores(model, data, ablation, Some(m.ig_steps))?.broadcast()?),
        "sequential" => {
            let r = ensemble_sequential(None, model, prune_subset(m, data), ablation, &prune_config(m))?;
            single(r.scores)
        }
        "parallel-ens" => {
            let members = vec![
                eap_scores(model, data, ablation)?,
                eap_ig_inputs_scores(model, data, ablation, m.ig_steps)?,
                eap_ig_acts_scores(model, data, ablation, m.ig_steps)?,
            ];
            let mut s = ensemble_parallel(&members, &Merge::Mean)?;
            s.provenance_mut().method = "parallel-ens".into();
            Ok((s, members))
        }
        "sequential-ens" => {
            let init = eap_ig_inputs_scores(model, data, ablation, m.ig_steps)?;
            let mut r = ensemble_sequential(Some(&init), model, prune_subset(m, data), ablation, &prune_config(m))?;
            r.scores.provenance_mut().method = "sequential-ens".into();
            Ok((r.scores, vec![init]))
        }
        "hybrid-ens" => {
            let cfg = HybridConfig {
                ablation: ablation.clone(),
                ig_steps: m.ig_steps,
                prune: Some(prune_config(m)),
                prune_instances: m.prune_instances,
            };
            let r = ensemble_hybrid(model, data, &cfg)?;
            let mut s = r.scores;
            s.provenance_mut().method = "hybrid-ens".into();
            Ok((s, r.members))
        }
        other => Err(mib_core::Error::InvalidArgument(format!("unknown method {other:?}"))),
    }
}

fn series(scores: &AttributionScores, cfg: &RunConfig) -> CliResult<CircuitSeries> {
    let m = &cfg.method;
    match m.selection.as_str() {
        "topk" => Ok(circuits_from_scores(scores, &cfg.grid, RankBy::Absolute)?),
        "pnr" => {
            let rho = m.rho.ok_or_else(|| CliError::validation("pnr selection needs method.rho"))?;
            let entries = cfg
                .grid
                .iter()
                .map(|&k| {
                    let p = SelectionProblem::with_fraction(scores.clone(), k)?;
                    Ok((k, select_pnr(&p, rho)?.circuit))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(CircuitSeries { entries })
        }
        "ilp" => {
            let entries = cfg
                .grid
                .iter()
                .map(|&k| {
                    let mut p = SelectionProblem::with_fraction(scores.clone(), k)?.connected(m.connected);
                    if let Some(rho) = m.rho {
                        p = p.positive_ratio(rho)?;
                    }
                    Ok((k, select_ilp(&p, &IlpConfig::default())?.circuit))
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(CircuitSeries { entries })
        }
        other => Err(CliError::validation(format!("unknown selection {other:?}"))),
    }
}

/// Scores edges, writes a score submission under `scores/` and one boolean
/// circuit per threshold under `circuits/`.
pub fn discover(cfg: &RunConfig) -> CliResult<()> {
    let l = load(cfg)?;
    let out = cfg.output_dir()?;
    let data = l.take(cfg.data.score_split, cfg.data.instances)?;
    let ablation = l.ablation(cfg)?;
    let m = &cfg.method;
    let (scores, members) = if m.bootstrap_resamples > 0 {
        let mut s = bootstrap_filter(
            |d| score(&l, m, d, &ablation).map(|r| r.0),
            data,
            m.bootstrap_resamples,
            m.bootstrap_tau,
            cfg.seed,
        )?;
        let name = format!("{}+bootstrap", s.provenance().method);
        s.provenance_mut().method = name;
        (s, Vec::new())
    } else {
        score(&l, m, data, &ablation)?
    };
    std::fs::create_dir_all(out)?;
    for member in &members {
        let name = member.provenance().method.clone();
        println!("member {name}: max |score| {:.6}", member.max_abs());
        serialize_scores(member, &l.name, l.task.name(), &out.join("members").join(format!("{name}.json")))?;
    }
    write_score_submission(&out.join(SCORES_DIR), &l.name, l.task.name(), &scores)?;
    let circuits = series(&scores, cfg)?;
    let provenance = serde_json::to_value(scores.provenance())?;
    write_boolean_submission(&out.join(CIRCUITS_DIR), &l.name, l.task.name(), &circuits, &provenance)?;
    let mut rows = Vec::new();
    for (k, c) in &circuits.entries {
        let edges = c.member_edges().len();
        let pct = 100.0 * c.edge_percentage()?;
        println!("k {k}: {edges} edges, weighted {pct:.2}%");
        rows.push(json!({ "k": k, "edges": edges, "weighted_edge_percentage": pct }));
    }
    write_json(
        &out.join("discover.json"),
        &json!({
            "method": scores.provenance().method,
            "model": l.name,
            "task": l.task.name(),
            "n_edges": l.model.graph().n_edges(),
            "instances": data.len(),
            "circuits": rows,
        }),
    )?;
    write_manifest(out, "discover", Some(cfg), &[], l.inputs())
}

fn method_label(root: &Path, l: &Loaded, sub: &Submission, grid: &[f64]) -> String {
    match sub {
        Submission::Scores(s) => s.provenance().method.clone(),
        Submission::Boolean(_) => {
            let path = root
                .join("binary")
                .join(&l.name)
                .join(l.task.name())
                .join(format!("circuit_{}.json", grid[0]));
            parse_circuit(l.model.graph().clone(), &path)
                .ok()
                .and_then(|(_, meta)| meta.provenance.get("method").and_then(|v| v.as_str()).map(String::from))
                .unwrap_or_else(|| "submission".into())
        }
    }
}

/// Faithfulness curve, CPR and CMD of a submission under `circuits`.
pub fn eval_circuits(cfg: &RunConfig, circuits: &Path, label: Option<&str>) -> CliResult<MetricReport> {
    let l = load(cfg)?;
    let out = cfg.output_dir()?;
    if !circuits.is_dir() {
        return Err(CliError::validation(format!("{} is not a directory", circuits.display())));
    }
    let sub = read_submission(circuits, &l.name, l.task.name(), l.model.graph().clone(), &cfg.grid)?;
    let method = label.map_or_else(|| method_label(circuits, &l, &sub, &cfg.grid), String::from);
    let (series, auroc) = match &sub {
        Submission::Scores(s) => {
            let auroc = match l.truth.as_ref().and_then(|t| t.circuit.as_ref()) {
                Some(truth) => Some(ground_truth_auroc(s, truth)?),
                None => None,
            };
            (circuits_from_scores(s, &cfg.grid, RankBy::Absolute)?, auroc)
        }
        Submission::Boolean(series) => (series.clone(), None),
    };
    let data = l.take(cfg.data.eval_split, cfg.data.eval_instances)?;
    let ablation = l.ablation(cfg)?;
    let c = curve(&l.model, &series, data, &ablation)?;
    let report = MetricReport::new(&method, &l.name, l.task.name(), c, auroc);
    std::fs::create_dir_all(out)?;
    write_json(&out.join("curve.json"), &report.curve)?;
    write_json(
        &out.join("report.json"),
        &RunReport::Circuit {
            metric: report.clone(),
        },
    )?;
    let table = render_table(std::slice::from_ref(&report));
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    let mut inputs = l.inputs();
    inputs["eval_fingerprint"] = json!(fingerprint_of(data));
    inputs["circuits"] = json!(circuits.display().to_string());
    write_manifest(out, "eval-circuits", Some(cfg), &[format!("--circuits {}", circuits.display())], inputs)?;
    Ok(report)
}
