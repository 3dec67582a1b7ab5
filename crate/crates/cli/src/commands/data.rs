// SPDX-License-Identifier: MIT OR Apache-2.0

use mib_core::model::{accuracy, train_toy_model, ModelConfig, TrainConfig};
use mib_core::tasks::{write_dataset, SplitName};
use serde_json::json;

use crate::config::RunConfig;
use crate::context::{load_data, resolve_task};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, write_manifest};

/// Writes `<task>.jsonl` with all four splits.
pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let task = resolve_task(cfg)?;
    let out = cfg.output_dir()?;
    std::fs::create_dir_all(out)?;
    let data = load_data(cfg, task)?;
    let file = format!("{task}.jsonl");
    write_dataset(&data, &out.join(&file))?;
    for s in SplitName::ALL {
        println!("{}: {} instances", crate::context::kebab(&s), data.split(s).len());
    }
    let inputs = json!({
        "task": task.name(),
        "dataset_fingerprint": format!("{:016x}", data.fingerprint()),
        "cf_strategy": data.cf_strategy,
    });
    write_manifest(out, "gen-data", Some(cfg), &[], inputs)
}

/// Trains a toy model on the task and writes `model.json` and `train_report.json`.
pub fn train_model(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let task = resolve_task(cfg)?;
    let out = cfg.output_dir()?;
    let data = load_data(cfg, task)?;
    let max_len = SplitName::ALL
        .iter()
        .flat_map(|&s| data.split(s))
        .map(|i| i.tokens.len())
        .max()
        .ok_or_else(|| CliError::validation("empty dataset"))?;
    let m = &cfg.model;
    let mut mc = ModelConfig::new(m.n_layers, m.n_heads, m.d_head, task.vocab().len(), max_len);
    mc.seed = cfg.seed;
    let tc = TrainConfig {
        steps: m.steps,
        batch_size: m.batch_size,
        lr: m.lr,
        target_accuracy: Some(m.target_accuracy),
        eval_every: 100,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let (model, report) = train_toy_model(mc, &data.train, &data.validation, &tc)?;
    std::fs::create_dir_all(out)?;
    model.save(&out.join("model.json"))?;
    let public = accuracy(&model, &data.public_test)?;
    println!(
        "steps {} loss {:.4} train acc {:.3} validation acc {:.3} public-test acc {public:.3}",
        report.steps_run, report.final_loss, report.train_accuracy, report.validation_accuracy
    );
    write_json(
        &out.join("train_report.json"),
        &json!({ "report": report, "public_test_accuracy": public }),
    )?;
    let inputs = json!({
        "task": task.name(),
        "dataset_fingerprint": format!("{:016x}", data.fingerprint()),
        "model_fingerprint": format!("{:016x}", model.fingerprint()),
    });
    write_manifest(out, "train-model", Some(cfg), &[], inputs)
}
