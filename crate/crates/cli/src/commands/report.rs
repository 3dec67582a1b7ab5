// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RunReport;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, write_manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mark {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Rounded to the three decimals shown in the text table.
    pub value: f64,
    /// Best-layer value, for faithfulness cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mark: Option<Mark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub higher_is_better: bool,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub cpr: Table,
    pub cmd: Table,
    pub faithfulness: Table,
}

fn round3(x: f64) -> f64 {
    format!("{x:.3}").parse().unwrap_or(x)
}

/// Cells keyed by (method, column) in first-seen row order.
struct Builder {
    title: &'static str,
    higher_is_better: bool,
    methods: Vec<String>,
    cells: BTreeMap<(String, String), Cell>,
}

impl Builder {
    fn new(title: &'static str, higher_is_better: bool) -> Self {
        Self {
            title,
            higher_is_better,
            methods: Vec::new(),
            cells: BTreeMap::new(),
        }
    }

    fn insert(&mut self, method: &str, column: &str, value: f64, best: Option<f64>, source: &Path) -> CliResult<()> {
        let key = (method.to_string(), column.to_string());
        if self.cells.contains_key(&key) {
            return Err(CliError::validation(format!(
                "conflicting runs: {method} on {column} appears twice (second in {})",
                source.display()
            )));
        }
        if !self.methods.iter().any(|m| m == method) {
            self.methods.push(method.to_string());
        }
        self.cells.insert(
            key,
            Cell {
                value: round3(value),
                best: best.map(round3),
                mark: None,
            },
        );
        Ok(())
    }

    fn finish(self) -> Table {
        let mut columns: Vec<String> = self.cells.keys().map(|(_, c)| c.clone()).collect();
        columns.sort();
        columns.dedup();
        let mut rows: Vec<Row> = self
            .methods
            .iter()
            .map(|m| Row {
                method: m.clone(),
                cells: columns.iter().map(|c| self.cells.get(&(m.clone(), c.clone())).cloned()).collect(),
            })
            .collect();
        for ci in 0..columns.len() {
            let mut values: Vec<f64> = rows.iter().filter_map(|r| r.cells[ci].as_ref().map(|c| c.value)).collect();
            values.sort_by(|a, b| if self.higher_is_better { b.total_cmp(a) } else { a.total_cmp(b) });
            values.dedup();
            for r in &mut rows {
                if let Some(c) = &mut r.cells[ci] {
                    c.mark = match values.iter().position(|&v| v == c.value) {
                        Some(0) => Some(Mark::Best),
                        Some(1) => Some(Mark::Second),
                        _ => None,
                    };
                }
            }
        }
        Table {
            title: self.title.to_string(),
            higher_is_better: self.higher_is_better,
            columns,
            rows,
        }
    }
}

/// Aggregates completed run directories into CPR, CMD and faithfulness tables.
pub fn aggregate(runs: &[PathBuf]) -> CliResult<Tables> {
    if runs.is_empty() {
        return Err(CliError::validation("report needs at least one run directory"));
    }
    let mut cpr = Builder::new("CPR (higher is better)", true);
    let mut cmd = Builder::new("CMD (lower is better)", false);
    let mut faith = Builder::new("Faithfulness: mean across layers (best layer)", true);
    // every circuit run in one column must share its ablation and evaluation data
    let mut column_setup: BTreeMap<String, (String, String, PathBuf)> = BTreeMap::new();
    for dir in runs {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::validation(format!("{}: {e} (not a completed run?)", path.display())))?;
        let report: RunReport =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        match report {
            RunReport::Circuit { metric } => {
                let column = format!("{}/{}", metric.model, metric.task);
                let setup = (metric.curve.ablation.clone(), metric.curve.dataset.clone());
                match column_setup.get(&column) {
                    Some((a, d, first)) if (a, d) != (&setup.0, &setup.1) => {
                        return Err(CliError::validation(format!(
                            "conflicting configs for {column}: {} used ablation {a} on data {d}, {} used ablation {} on data {}",
                            first.display(),
                            dir.display(),
                            setup.0,
                            setup.1
                        )));
                    }
                    Some(_) => {}
                    None => {
                        column_setup.insert(column.clone(), (setup.0, setup.1, dir.clone()));
                    }
                }
                cpr.insert(&metric.method, &column, metric.cpr, None, dir)?;
                cmd.insert(&metric.method, &column, metric.cmd, None, dir)?;
            }
            RunReport::Featurize(r) => {
                let column = format!("{}/{}/{}", r.model, r.task, r.variable);
                faith.insert(&r.method, &column, r.mean, Some(r.best), dir)?;
            }
        }
    }
    Ok(Tables {
        cpr: cpr.finish(),
        cmd: cmd.finish(),
        faithfulness: faith.finish(),
    })
}

fn show(c: &Option<Cell>) -> String {
    let Some(c) = c else { return "-".into() };
    let mut s = format!("{:.3}", c.value);
    if let Some(b) = c.best {
        let _ = write!(s, " ({b:.3})");
    }
    match c.mark {
        Some(Mark::Best) => format!("**{s}**"),
        Some(Mark::Second) => format!("_{s}_"),
        None => s,
    }
}

/// Text rendering; `**x**` marks the best cell of a column and `_x_` the second best.
pub fn render(t: &Table) -> String {
    let mut grid = vec![std::iter::once("method".to_string()).chain(t.columns.iter().cloned()).collect::<Vec<_>>()];
    for r in &t.rows {
        grid.push(std::iter::once(r.method.clone()).chain(r.cells.iter().map(show)).collect());
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("{}\n", t.title);
    for (i, row) in grid.iter().enumerate() {
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

pub fn report(runs: &[PathBuf], out: &Path) -> CliResult<Tables> {
    let tables = aggregate(runs)?;
    std::fs::create_dir_all(out)?;
    let mut text = String::new();
    for t in [&tables.cpr, &tables.cmd, &tables.faithfulness] {
        if !t.rows.is_empty() {
            text.push_str(&render(t));
            text.push('\n');
        }
    }
    std::fs::write(out.join("tables.txt"), &text)?;
    write_json(&out.join("tables.json"), &tables)?;
    print!("{text}");
    let names: Vec<String> = runs.iter().map(|p| p.display().to_string()).collect();
    let mut runs_args = names.clone();
    runs_args.push("--out <dir>".into());
    let inputs = json!({ "runs": names });
    write_manifest(out, "report", None, &runs_args, inputs)?;
    Ok(tables)
}
