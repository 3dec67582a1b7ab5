// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod circuits;
pub mod data;
pub mod featurize;
pub mod report;
pub mod selfcheck;

use mib_core::eval::MetricReport;
use serde::{Deserialize, Serialize};

pub use featurize::FeaturizeReport;

/// Contents of `report.json` in a completed evaluation run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunReport {
    Circuit { metric: MetricReport },
    Featurize(FeaturizeReport),
}
