// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `mib` command line: data generation, toy-model training, circuit
//! discovery and evaluation, featurizer alignment and table aggregation.

pub mod commands;
pub mod config;
pub mod context;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{CircuitArgs, CommonArgs, FeaturizeArgs, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "mib", version, about = "Circuit localization and causal-variable localization benchmarks")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a task dataset.
    GenData(CommonArgs),
    /// Train a toy transformer on a task.
    TrainModel(CommonArgs),
    /// Score edges and write score and boolean-circuit submissions.
    Discover {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        circuit: CircuitArgs,
    },
    /// Faithfulness curve, CPR and CMD of a submission.
    EvalCircuits {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        circuit: CircuitArgs,
        /// Submission root holding `importances/` or `binary/`.
        #[arg(long)]
        circuits: PathBuf,
        /// Method name shown in tables.
        #[arg(long)]
        label: Option<String>,
    },
    /// Align a causal variable with a featurizer at every layer.
    Featurize {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        featurize: FeaturizeArgs,
    },
    /// Aggregate evaluation runs into tables.
    Report {
        /// Run directories containing report.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Quick checks of gradients, metrics and fixtures.
    Selfcheck,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(common) => commands::data::gen_data(&RunConfig::resolve(&common)?),
        Command::TrainModel(common) => commands::data::train_model(&RunConfig::resolve(&common)?),
        Command::Discover { common, circuit } => {
            let mut cfg = RunConfig::resolve(&common)?;
            cfg.apply_circuit(&circuit);
            commands::circuits::discover(&cfg)
        }
        Command::EvalCircuits {
            common,
            circuit,
            circuits,
            label,
        } => {
            let mut cfg = RunConfig::resolve(&common)?;
            cfg.apply_circuit(&circuit);
            commands::circuits::eval_circuits(&cfg, &circuits, label.as_deref()).map(|_| ())
        }
        Command::Featurize { common, featurize } => {
            let mut cfg = RunConfig::resolve(&common)?;
            cfg.apply_featurize(&featurize)?;
            commands::featurize::featurize(&cfg).map(|_| ())
        }
        Command::Report { runs, out } => commands::report::report(&runs, &out).map(|_| ()),
        Command::Selfcheck => commands::selfcheck::selfcheck(),
    }
}
