// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{cmd, cpr, FaithfulnessCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub model: String,
    pub task: String,
    pub cpr: f64,
    pub cmd: f64,
    pub curve: FaithfulnessCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
}

impl MetricReport {
    pub fn new(method: &str, model: &str, task: &str, curve: FaithfulnessCurve, auroc: Option<f64>) -> Self {
        Self {
            method: method.into(),
            model: model.into(),
            task: task.into(),
            cpr: cpr(&curve),
            cmd: cmd(&curve),
            curve,
            auroc,
        }
    }
}

/// Plain-text table with one row per method and one `CPR / CMD` column per
/// model/task pair, plus an AUROC column when any report carries one.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let columns: BTreeSet<(String, String)> = reports.iter().map(|r| (r.model.clone(), r.task.clone())).collect();
    let with_auroc = reports.iter().any(|r| r.auroc.is_some());

    let mut header = vec!["method".to_string()];
    header.extend(columns.iter().map(|(m, t)| format!("{m}/{t} CPR / CMD")));
    if with_auroc {
        header.push("AUROC".into());
    }
    let mut rows = vec![header];
    for method in methods {
        let mut row = vec![method.to_string()];
        for (m, t) in &columns {
            let cell = reports
                .iter()
                .find(|r| r.method == method && &r.model == m && &r.task == t)
                .map_or_else(|| "-".to_string(), |r| format!("{:.3} / {:.3}", r.cpr, r.cmd));
            row.push(cell);
        }
        if with_auroc {
            let a = reports
                .iter()
                .filter(|r| r.method == method)
                .find_map(|r| r.auroc)
                .map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
            row.push(a);
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("-|-"));
        }
    }
    out
}
