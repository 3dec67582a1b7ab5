// SPDX-License-Identifier: MIT OR Apache-2.0

use mib_core::featurize::{
    control_guardrail, fit_pca, save_artifact, train_das, train_dbm, train_nonlinear, train_tanh_orthogonal,
    AlignmentArtifact, FeaturizeConfig, FeaturizerKind, GuardrailReport, InterventionSite, PairSet,
};
use mib_core::tasks::TaskId;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RunReport;
use crate::config::{FeaturizeSpec, RunConfig};
use crate::context::{load, Loaded};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, write_manifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub site: String,
    pub faithfulness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeReport {
    pub method: String,
    pub model: String,
    pub task: String,
    pub variable: String,
    pub n_pairs: usize,
    pub layers: Vec<LayerScore>,
    /// Mean faithfulness across the swept layers.
    pub mean: f64,
    pub best_layer: usize,
    pub best: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guardrail: Option<GuardrailReport>,
}

/// Variable aligned when the config names none.
pub fn default_variable(task: TaskId) -> &'static str {
    match task {
        TaskId::Ioi => "io",
        TaskId::ArithmeticAdd => "X_Carry",
        TaskId::ArithmeticSub => "X_Borrow",
        TaskId::Mcqa => "X_Order",
        TaskId::Attribute => "A_Cont",
        TaskId::Copy => "io",
        TaskId::Planted => "side",
        TaskId::Xor => "a",
    }
}

fn fit(
    l: &Loaded,
    cfg: &RunConfig,
    site: InterventionSite,
    variable: &str,
    train: &PairSet,
) -> CliResult<AlignmentArtifact> {
    let f = &cfg.featurize;
    let fc = FeaturizeConfig {
        steps: f.steps,
        batch_size: f.batch_size,
        lr: f.lr,
        seed: cfg.seed,
    };
    let m = &l.model;
    Ok(match f.kind {
        FeaturizerKind::Identity => AlignmentArtifact::full_vector(m, site, variable)?,
        FeaturizerKind::Orthogonal => train_das(m, site, train, f.dims, &fc)?,
        FeaturizerKind::TanhOrthogonal => train_tanh_orthogonal(m, site, train, f.dims, &fc)?,
        FeaturizerKind::NonlinearMlp => train_nonlinear(m, site, train, f.dims, f.hidden, &fc)?,
        FeaturizerKind::Mask => train_dbm(m, site, train, f.sparsity, &fc)?,
        FeaturizerKind::Pca => fit_pca(m, site, l.data.split(cfg.data.score_split), variable, f.dims)?.0,
    })
}

fn site_for(f: &FeaturizeSpec, layer: usize) -> InterventionSite {
    match f.head {
        Some(h) => InterventionSite::head(layer, h, f.position),
        None => InterventionSite::residual(layer, f.position),
    }
}

/// One "mean (best)" row with a column per swept layer.
pub fn render_layers(r: &FeaturizeReport) -> String {
    let mut header = vec!["method".to_string()];
    let mut row = vec![r.method.clone()];
    for s in &r.layers {
        header.push(format!("L{}", s.layer));
        row.push(format!("{:.3}", s.faithfulness));
    }
    header.push("mean (best)".into());
    row.push(format!("{:.3} ({:.3})", r.mean, r.best));
    let widths: Vec<usize> = header.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    format!("{}\n{}\n{}\n", line(&header), rule.join("-|-"), line(&row))
}

/// Trains the requested featurizer at every swept layer, writes one artifact
/// bundle per layer and the mean/best-layer table.
pub fn featurize(cfg: &RunConfig) -> CliResult<FeaturizeReport> {
    let l = load(cfg)?;
    let out = cfg.output_dir()?;
    let f = &cfg.featurize;
    let variable = f.variable.clone().unwrap_or_else(|| default_variable(l.task).to_string());
    let cm = l.task.causal_model();
    if !cm.has_variable(&variable) {
        return Err(CliError::validation(format!(
            "task {} has no causal variable {variable:?}; variables: {}",
            l.task,
            cm.variables().collect::<Vec<_>>().join(", ")
        )));
    }
    let n_layers = l.model.config().n_layers;
    let layers = match (&f.layers, f.head) {
        (Some(ls), _) => ls.clone(),
        (None, Some(_)) => (0..n_layers).collect(),
        (None, None) => (0..=n_layers).collect(),
    };
    if layers.is_empty() {
        return Err(CliError::validation("no layers to sweep"));
    }
    for &layer in &layers {
        site_for(f, layer).validate(&l.model)?;
    }
    let train = PairSet::sample(l.data.split(cfg.data.score_split), &cm, &variable, f.train_pairs, cfg.seed.wrapping_add(1))?;
    let eval = PairSet::sample(l.data.split(cfg.data.eval_split), &cm, &variable, f.eval_pairs, cfg.seed.wrapping_add(2))?;

    std::fs::create_dir_all(out)?;
    let mut scores = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let site = site_for(f, layer);
        let mut artifact = fit(&l, cfg, site, &variable, &train)?;
        let value = artifact.record_faithfulness(&l.model, &eval)?;
        save_artifact(&artifact, &out.join("artifacts").join(format!("layer{layer}")))?;
        println!("{site}: faithfulness {value:.3}");
        scores.push(LayerScore {
            layer,
            site: site.to_string(),
            faithfulness: value,
        });
    }
    let mean = scores.iter().map(|s| s.faithfulness).sum::<f64>() / scores.len() as f64;
    let best = scores
        .iter()
        .fold(&scores[0], |b, s| if s.faithfulness > b.faithfulness { s } else { b })
        .clone();

    let guardrail = if f.guardrail.unwrap_or(f.kind == FeaturizerKind::NonlinearMlp) {
        let g = control_guardrail(
            &l.model,
            site_for(f, best.layer),
            &train,
            &eval,
            f.dims,
            f.hidden,
            &FeaturizeConfig {
                steps: f.steps,
                batch_size: f.batch_size,
                lr: f.lr,
                seed: cfg.seed,
            },
            f.margin,
        )?;
        println!(
            "guardrail: control faithfulness {:.3}, baseline {:.3}, margin {:.3}: {}",
            g.control_faithfulness,
            g.random_baseline,
            g.margin,
            if g.passed { "pass" } else { "FAIL" }
        );
        Some(g)
    } else {
        None
    };

    let report = FeaturizeReport {
        method: f.kind.name().to_string(),
        model: l.name.clone(),
        task: l.task.name().to_string(),
        variable,
        n_pairs: eval.len(),
        layers: scores,
        mean,
        best_layer: best.layer,
        best: best.faithfulness,
        guardrail,
    };
    write_json(&out.join("featurize.json"), &report)?;
    write_json(&out.join("report.json"), &RunReport::Featurize(report.clone()))?;
    let table = render_layers(&report);
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    let mut inputs = l.inputs();
    inputs["train_pairs"] = json!(format!("{:016x}", train.fingerprint()));
    inputs["eval_pairs"] = json!(format!("{:016x}", eval.fingerprint()));
    write_manifest(out, "featurize", Some(cfg), &[], inputs)?;
    if let Some(g) = &report.guardrail {
        g.enforce()?;
    }
    Ok(report)
}
