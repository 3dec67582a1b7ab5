// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one declarative TOML file per run, with command-line
//! flags overriding individual fields.

use std::path::{Path, PathBuf};

use clap::Args;
use mib_core::featurize::{FeaturizerKind, PositionSelector};
use mib_core::graph::DEFAULT_GRID;
use mib_core::model::{AblationKind, GroundTruthKind};
use mib_core::tasks::{SplitName, TaskId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Registered circuit-discovery methods.
pub const METHODS: [&str; 11] = [
    "eap",
    "eap-ig-inputs",
    "eap-ig-acts",
    "exact",
    "ipe",
    "nap",
    "nap-ig",
    "sequential",
    "parallel-ens",
    "sequential-ens",
    "hybrid-ens",
];

/// Registered rules turning scores into one circuit per threshold.
pub const SELECTIONS: [&str; 3] = ["topk", "pnr", "ilp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<TaskId>,
    pub seed: u64,
    /// Not recorded in the provenance manifest so reruns into other directories match.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub ablation: AblationKind,
    pub grid: Vec<f64>,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub method: MethodConfig,
    pub featurize: FeaturizeSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            output: None,
            ablation: AblationKind::Counterfactual,
            grid: DEFAULT_GRID.to_vec(),
            data: DataConfig::default(),
            model: ModelSpec::default(),
            method: MethodConfig::default(),
            featurize: FeaturizeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file; generated from (task, n, seed) when absent.
    pub path: Option<PathBuf>,
    /// Training-split size when generating.
    pub n: usize,
    /// Split used for scoring and featurizer training.
    pub score_split: SplitName,
    /// Split used for evaluation.
    pub eval_split: SplitName,
    /// Leading instances of the score split that are used.
    pub instances: usize,
    /// Leading instances of the evaluation split that are used.
    pub eval_instances: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            n: 400,
            score_split: SplitName::Train,
            eval_split: SplitName::Validation,
            instances: 64,
            eval_instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub checkpoint: Option<PathBuf>,
    pub ground_truth: Option<GroundTruthKind>,
    /// Name used in submission folders and tables.
    pub name: Option<String>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            ground_truth: None,
            name: None,
            n_layers: 2,
            n_heads: 4,
            d_head: 8,
            steps: 3000,
            batch_size: 16,
            lr: 3e-3,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub ig_steps: usize,
    pub path_limit: usize,
    pub prune_steps: usize,
    pub prune_lr: f64,
    pub prune_weight: f64,
    pub prune_instances: usize,
    /// Bootstrap resamples; 0 disables filtering.
    pub bootstrap_resamples: usize,
    pub bootstrap_tau: f64,
    pub selection: String,
    /// Positive-edge ratio for `pnr`, and for `ilp` when set.
    pub rho: Option<f64>,
    /// Require every selected edge to lie on an embedding-to-logits path (`ilp`).
    pub connected: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: "eap".into(),
            ig_steps: mib_core::attribution::DEFAULT_IG_STEPS,
            path_limit: 100_000,
            prune_steps: 200,
            prune_lr: 0.1,
            prune_weight: 0.05,
            prune_instances: 64,
            bootstrap_resamples: 0,
            bootstrap_tau: mib_core::attribution::DEFAULT_CONSISTENCY,
            selection: "topk".into(),
            rho: None,
            connected: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeSpec {
    pub kind: FeaturizerKind,
    /// Causal variable; the task default when absent.
    pub variable: Option<String>,
    pub dims: usize,
    pub hidden: usize,
    pub sparsity: f64,
    /// Residual layers to sweep; all of them when absent.
    pub layers: Option<Vec<usize>>,
    /// Intervene on one head output instead of the residual stream.
    pub head: Option<usize>,
    pub position: PositionSelector,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    /// Control-task check; on by default for the nonlinear featurizer only.
    pub guardrail: Option<bool>,
    pub margin: f64,
}

impl Default for FeaturizeSpec {
    fn default() -> Self {
        Self {
            kind: FeaturizerKind::Orthogonal,
            variable: None,
            dims: 1,
            hidden: 16,
            sparsity: 0.05,
            layers: None,
            head: None,
            position: PositionSelector::Last,
            steps: 300,
            lr: 0.02,
            batch_size: 32,
            train_pairs: 256,
            eval_pairs: 500,
            guardrail: None,
            margin: mib_core::featurize::GUARDRAIL_MARGIN,
        }
    }
}

/// Flags shared by every pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model checkpoint file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Hand-wired fixture: copy-head, planted-direction, planted-axis or xor.
    #[arg(long)]
    pub ground_truth: Option<String>,
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training-split size when generating data.
    #[arg(long)]
    pub n: Option<usize>,
    /// cf or mean.
    #[arg(long)]
    pub ablation: Option<String>,
}

/// Flags of the circuit pipelines.
#[derive(Debug, Clone, Default, Args)]
pub struct CircuitArgs {
    #[arg(long)]
    pub method: Option<String>,
    /// Comma-separated edge fractions.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Leading score-split instances to use.
    #[arg(long)]
    pub instances: Option<usize>,
    /// topk, pnr or ilp.
    #[arg(long)]
    pub selection: Option<String>,
}

/// Flags of the featurizer pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct FeaturizeArgs {
    /// identity, orthogonal (das), pca, mask (dbm), nonlinear, tanh-orthogonal.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub variable: Option<String>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Comma-separated residual layers.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// last, an index, or last-K.
    #[arg(long)]
    pub position: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip the control-task guardrail.
    #[arg(long)]
    pub no_guardrail: bool,
}

fn parse_named<T: for<'de> Deserialize<'de>>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| CliError::validation(format!("unknown {what} {s:?}")))
}

pub fn parse_position(s: &str) -> CliResult<PositionSelector> {
    if s == "last" {
        return Ok(PositionSelector::Last);
    }
    if let Some(k) = s.strip_prefix("last-") {
        let offset = k.parse().map_err(|_| CliError::validation(format!("bad position {s:?}")))?;
        return Ok(PositionSelector::FromEnd { offset });
    }
    s.parse()
        .map(|index| PositionSelector::Fixed { index })
        .map_err(|_| CliError::validation(format!("bad position {s:?} (last, an index, or last-K)")))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    /// Config file (if any) with flags applied on top.
    pub fn resolve(common: &CommonArgs) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(t) = &common.task {
            cfg.task = Some(t.parse().map_err(|e: mib_core::Error| CliError::validation(e.to_string()))?);
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &common.out {
            cfg.output = Some(o.clone());
        }
        if let Some(m) = &common.model {
            cfg.model.checkpoint = Some(m.clone());
        }
        if let Some(g) = &common.ground_truth {
            cfg.model.ground_truth = Some(parse_named("ground-truth model", g)?);
        }
        if let Some(d) = &common.data {
            cfg.data.path = Some(d.clone());
        }
        if let Some(n) = common.n {
            cfg.data.n = n;
        }
        if let Some(a) = &common.ablation {
            cfg.ablation = a.parse().map_err(|e: mib_core::Error| CliError::validation(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn apply_circuit(&mut self, a: &CircuitArgs) {
        if let Some(m) = &a.method {
            self.method.name = m.clone();
        }
        if let Some(g) = &a.grid {
            self.grid = g.clone();
        }
        if let Some(n) = a.instances {
            self.data.instances = n;
        }
        if let Some(s) = &a.selection {
            self.method.selection = s.clone();
        }
    }

    pub fn apply_featurize(&mut self, a: &FeaturizeArgs) -> CliResult<()> {
        let f = &mut self.featurize;
        if let Some(k) = &a.kind {
            f.kind = k.parse().map_err(|e: mib_core::Error| CliError::validation(e.to_string()))?;
        }
        if let Some(v) = &a.variable {
            f.variable = Some(v.clone());
        }
        if let Some(d) = a.dims {
            f.dims = d;
        }
        if let Some(h) = a.hidden {
            f.hidden = h;
        }
        if let Some(l) = &a.layers {
            f.layers = Some(l.clone());
        }
        if let Some(p) = &a.position {
            f.position = parse_position(p)?;
        }
        if let Some(s) = a.steps {
            f.steps = s;
        }
        if a.no_guardrail {
            f.guardrail = Some(false);
        }
        Ok(())
    }

    pub fn output_dir(&self) -> CliResult<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::validation("no output directory (set `output` or pass --out)"))
    }

    /// Checks paths and registered names.
    pub fn validate(&self) -> CliResult<()> {
        for p in [&self.model.checkpoint, &self.data.path].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::validation(format!("{} does not exist", p.display())));
            }
        }
        if self.model.checkpoint.is_some() && self.model.ground_truth.is_some() {
            return Err(CliError::validation("set either model.checkpoint or model.ground_truth, not both"));
        }
        if !METHODS.contains(&self.method.name.as_str()) {
            return Err(CliError::validation(format!(
                "unknown method {:?}; registered methods: {}",
                self.method.name,
                METHODS.join(", ")
            )));
        }
        if !SELECTIONS.contains(&self.method.selection.as_str()) {
            return Err(CliError::validation(format!(
                "unknown selection {:?}; registered selections: {}",
                self.method.selection,
                SELECTIONS.join(", ")
            )));
        }
        if self.grid.is_empty() || self.grid.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(CliError::validation("grid thresholds must lie in (0, 1]"));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CliError::validation("grid thresholds must be strictly increasing"));
        }
        if self.data.n == 0 || self.data.instances == 0 || self.data.eval_instances == 0 {
            return Err(CliError::validation("data sizes must be positive"));
        }
        Ok(())
    }

    /// Resolved config as TOML, without the output directory.
    pub fn to_toml(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.output = None;
        toml::to_string(&c).map_err(|e| CliError::validation(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = RunConfig {
            task: Some(TaskId::Planted),
            ..RunConfig::default()
        };
        cfg.model.ground_truth = Some(GroundTruthKind::PlantedDirection);
        cfg.featurize.layers = Some(vec![0, 1]);
        cfg.featurize.position = PositionSelector::FromEnd { offset: 1 };
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[method]\nnmae = \"eap\"").is_err());
    }

    #[test]
    fn unknown_methods_list_the_registry() {
        let mut cfg = RunConfig::default();
        cfg.method.name = "magic".into();
        let err = cfg.validate().unwrap_err().to_string();
        for m in METHODS {
            assert!(err.contains(m), "{err}");
        }
    }

    #[test]
    fn positions_parse() {
        assert_eq!(parse_position("last").unwrap(), PositionSelector::Last);
        assert_eq!(parse_position("3").unwrap(), PositionSelector::Fixed { index: 3 });
        assert_eq!(parse_position("last-2").unwrap(), PositionSelector::FromEnd { offset: 2 });
        assert!(parse_position("first").is_err());
    }
}
