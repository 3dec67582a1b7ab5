// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model and dataset resolution shared by the pipelines.

use mib_core::model::{build_ground_truth_model, AblationKind, AblationSpec, GroundTruthModel, TransformerModel};
use mib_core::tasks::{dataset_fingerprint, read_dataset, DatasetSplit, TaskId, TaskInstance};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub struct Loaded {
    pub model: TransformerModel,
    /// Model name used in submission folders and tables.
    pub name: String,
    pub task: TaskId,
    pub truth: Option<GroundTruthModel>,
    pub data: DatasetSplit,
}

pub fn kebab<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        _ => String::new(),
    }
}

pub fn resolve_task(cfg: &RunConfig) -> CliResult<TaskId> {
    cfg.task.ok_or_else(|| CliError::validation("no task (set `task` or pass --task)"))
}

pub fn load_data(cfg: &RunConfig, task: TaskId) -> CliResult<DatasetSplit> {
    match &cfg.data.path {
        Some(p) => {
            let d = read_dataset(p)?;
            if d.task != task {
                return Err(CliError::validation(format!(
                    "{} holds {} instances, expected {task}",
                    p.display(),
                    d.task
                )));
            }
            Ok(d)
        }
        None => Ok(task.generate(cfg.data.n, cfg.seed)?),
    }
}

pub fn load(cfg: &RunConfig) -> CliResult<Loaded> {
    cfg.validate()?;
    let (model, name, task, truth) = match (&cfg.model.checkpoint, cfg.model.ground_truth) {
        (Some(path), None) => {
            let model = TransformerModel::load(path)?;
            let name = cfg.model.name.clone().unwrap_or_else(|| {
                path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
            });
            (model, name, resolve_task(cfg)?, None)
        }
        (None, Some(kind)) => {
            let gt = build_ground_truth_model(kind, cfg.seed);
            if let Some(t) = cfg.task.filter(|&t| t != gt.task) {
                return Err(CliError::validation(format!(
                    "ground-truth model {} runs the {} task, not {t}",
                    kebab(&kind),
                    gt.task
                )));
            }
            let name = cfg.model.name.clone().unwrap_or_else(|| kebab(&kind));
            (gt.model.clone(), name, gt.task, Some(gt))
        }
        _ => return Err(CliError::validation("no model (pass --model <checkpoint> or --ground-truth <kind>)")),
    };
    let data = load_data(cfg, task)?;
    Ok(Loaded {
        model,
        name,
        task,
        truth,
        data,
    })
}

impl Loaded {
    /// Leading `n` instances of a split.
    pub fn take(&self, split: mib_core::tasks::SplitName, n: usize) -> CliResult<&[TaskInstance]> {
        let s = self.data.split(split);
        if s.is_empty() {
            return Err(CliError::validation(format!("the {} split is empty", kebab(&split))));
        }
        Ok(&s[..n.min(s.len())])
    }

    /// Ablation source; mean ablation averages over the whole score split.
    pub fn ablation(&self, cfg: &RunConfig) -> CliResult<AblationSpec> {
        Ok(match cfg.ablation {
            AblationKind::Counterfactual => AblationSpec::Counterfactual,
            AblationKind::Mean => AblationSpec::mean_over(&self.model, self.data.split(cfg.data.score_split))?,
        })
    }

    pub fn inputs(&self) -> Value {
        json!({
            "model": self.name,
            "task": self.task.name(),
            "model_fingerprint": format!("{:016x}", self.model.fingerprint()),
            "dataset_fingerprint": format!("{:016x}", self.data.fingerprint()),
        })
    }
}

pub fn fingerprint_of(data: &[TaskInstance]) -> String {
    format!("{:016x}", dataset_fingerprint(data))
}
