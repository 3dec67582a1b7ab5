// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit files and the submission folder layout.
//!
//! A circuit file is a JSON object whose `edges` member maps canonical edge
//! names to either booleans (membership) or numbers (importance scores).
//! Submissions live under `importances/<model>/<task>/` (exactly one score
//! file) or `binary/<model>/<task>/` (one boolean file per threshold).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{Circuit, CircuitRepr, CircuitSeries, ComputationGraph};
use crate::attribution::AttributionScores;
use crate::error::{Error, Result};

pub const CIRCUIT_FORMAT: &str = "mib-circuit";
const CIRCUIT_VERSION: u32 = 1;
const SCORE_FILE: &str = "importances.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CircuitDoc {
    format: String,
    version: u32,
    model: String,
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<f64>,
    edges: BTreeMap<String, Json>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    neurons: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    provenance: Json,
}

/// Header fields stored next to the edges of a circuit file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CircuitMeta {
    pub model: String,
    pub task: String,
    pub k: Option<f64>,
    pub provenance: Json,
}

pub fn serialize_circuit(circuit: &Circuit, meta: &CircuitMeta, path: &Path) -> Result<()> {
    let g = circuit.graph();
    let edges = (0..g.n_edges())
        .map(|e| {
            let v = match circuit.repr() {
                CircuitRepr::Membership(m) => Json::Bool(m[e]),
                CircuitRepr::Scores(s) => Json::from(s[e]),
            };
            (g.edge_name(e).to_string(), v)
        })
        .collect();
    let neurons = circuit
        .neurons()
        .iter()
        .map(|(&n, set)| (g.node(n).to_string(), set.iter().copied().collect()))
        .collect();
    let doc = CircuitDoc {
        format: CIRCUIT_FORMAT.into(),
        version: CIRCUIT_VERSION,
        model: meta.model.clone(),
        task: meta.task.clone(),
        k: meta.k,
        edges,
        neurons,
        provenance: meta.provenance.clone(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

/// Writes a score map as a circuit file carrying the scores' provenance.
pub fn serialize_scores(scores: &AttributionScores, model: &str, task: &str, path: &Path) -> Result<()> {
    let circuit = Circuit::from_scores(scores.graph().clone(), scores.values().to_vec())?;
    let meta = CircuitMeta {
        model: model.into(),
        task: task.into(),
        k: None,
        provenance: serde_json::to_value(scores.provenance())?,
    };
    serialize_circuit(&circuit, &meta, path)
}

/// Reads a circuit file against `graph`. Edges absent from the file are
/// non-members (score 0).
pub fn parse_circuit(graph: Arc<ComputationGraph>, path: &Path) -> Result<(Circuit, CircuitMeta)> {
    let text = fs::read_to_string(path)?;
    let fail = |msg: String| Error::CircuitFormat(format!("{}: {msg}", path.display()));
    let doc: CircuitDoc = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    if doc.format != CIRCUIT_FORMAT || doc.version != CIRCUIT_VERSION {
        return Err(fail(format!("unsupported format {} v{}", doc.format, doc.version)));
    }
    let mut member = vec![false; graph.n_edges()];
    let mut scores = vec![0.0; graph.n_edges()];
    let (mut bools, mut numbers) = (0usize, 0usize);
    for (name, v) in &doc.edges {
        let e = graph
            .edge_by_name(name)
            .ok_or_else(|| Error::UnknownEdge(format!("{}: unknown edge key \"{name}\"", path.display())))?;
        match v {
            Json::Bool(b) => {
                bools += 1;
                member[e] = *b;
            }
            Json::Number(n) => {
                numbers += 1;
                scores[e] = n.as_f64().ok_or_else(|| fail(format!("edge \"{name}\": bad number")))?;
            }
            _ => return Err(fail(format!("edge \"{name}\": value must be a boolean or a number"))),
        }
    }
    if bools > 0 && numbers > 0 {
        return Err(fail("mixes boolean and score values".into()));
    }
    let mut circuit = if numbers > 0 {
        Circuit::from_scores(graph.clone(), scores)?
    } else {
        Circuit::from_membership(graph.clone(), member)?
    };
    for (node, idx) in doc.neurons {
        let id = super::NodeKind::parse(&node)
            .and_then(|k| graph.node_id(k))
            .ok_or_else(|| fail(format!("unknown node \"{node}\" in neurons")))?;
        circuit = circuit.with_neurons(id, idx.into_iter().collect::<BTreeSet<_>>())?;
    }
    let meta = CircuitMeta {
        model: doc.model,
        task: doc.task,
        k: doc.k,
        provenance: doc.provenance,
    };
    Ok((circuit, meta))
}

/// A parsed submission for one (model, task).
#[derive(Debug, Clone, PartialEq)]
pub enum Submission {
    Scores(AttributionScores),
    Boolean(CircuitSeries),
}

fn score_dir(root: &Path, model: &str, task: &str) -> PathBuf {
    root.join("importances").join(model).join(task)
}

fn binary_dir(root: &Path, model: &str, task: &str) -> PathBuf {
    root.join("binary").join(model).join(task)
}

fn threshold_file(k: f64) -> String {
    format!("circuit_{k}.json")
}

pub fn write_score_submission(root: &Path, model: &str, task: &str, scores: &AttributionScores) -> Result<PathBuf> {
    let path = score_dir(root, model, task).join(SCORE_FILE);
    serialize_scores(scores, model, task, &path)?;
    Ok(path)
}

pub fn write_boolean_submission(
    root: &Path,
    model: &str,
    task: &str,
    series: &CircuitSeries,
    provenance: &Json,
) -> Result<Vec<PathBuf>> {
    let dir = binary_dir(root, model, task);
    let mut out = Vec::with_capacity(series.entries.len());
    for (k, c) in &series.entries {
        if c.membership().is_none() {
            return Err(Error::CircuitFormat(format!("circuit at k = {k} is not boolean")));
        }
        let path = dir.join(threshold_file(*k));
        let meta = CircuitMeta {
            model: model.into(),
            task: task.into(),
            k: Some(*k),
            provenance: provenance.clone(),
        };
        serialize_circuit(c, &meta, &path)?;
        out.push(path);
    }
    Ok(out)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "json"));
    files.sort();
    Ok(files)
}

/// Reads the submission for (`model`, `task`) under `root`.
///
/// Score submissions must contain exactly one file; boolean submissions must
/// contain exactly one file per threshold of `grid`.
pub fn read_submission(
    root: &Path,
    model: &str,
    task: &str,
    graph: Arc<ComputationGraph>,
    grid: &[f64],
) -> Result<Submission> {
    let sdir = score_dir(root, model, task);
    let bdir = binary_dir(root, model, task);
    match (sdir.is_dir(), bdir.is_dir()) {
        (true, true) => Err(Error::CircuitFormat(format!(
            "both {} and {} exist; submit one representation",
            sdir.display(),
            bdir.display()
        ))),
        (false, false) => Err(Error::CircuitFormat(format!(
            "no submission for {model}/{task} under {}",
            root.display()
        ))),
        (true, false) => {
            let files = json_files(&sdir)?;
            if files.len() != 1 {
                return Err(Error::CircuitFormat(format!(
                    "{} must hold exactly one score file, found {}",
                    sdir.display(),
                    files.len()
                )));
            }
            let (c, meta) = parse_circuit(graph.clone(), &files[0])?;
            let values = c
                .scores()
                .ok_or_else(|| Error::CircuitFormat(format!("{} holds booleans, expected scores", files[0].display())))?
                .to_vec();
            let prov = serde_json::from_value(meta.provenance).unwrap_or_default();
            Ok(Submission::Scores(AttributionScores::new(graph, values, prov)?))
        }
        (false, true) => {
            let expected: BTreeSet<String> = grid.iter().map(|&k| threshold_file(k)).collect();
            for f in json_files(&bdir)? {
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if !expected.contains(&name) {
                    return Err(Error::CircuitFormat(format!(
                        "unexpected file {} (not a threshold of the grid)",
                        f.display()
                    )));
                }
            }
            let mut entries = Vec::with_capacity(grid.len());
            for &k in grid {
                let path = bdir.join(threshold_file(k));
                if !path.is_file() {
                    return Err(Error::CircuitFormat(format!(
                        "missing circuit file for k = {k} ({})",
                        path.display()
                    )));
                }
                let (c, meta) = parse_circuit(graph.clone(), &path)?;
                if c.membership().is_none() {
                    return Err(Error::CircuitFormat(format!("{} holds scores, expected booleans", path.display())));
                }
                if meta.k.is_some_and(|fk| fk != k) {
                    return Err(Error::CircuitFormat(format!("{} declares a different k", path.display())));
                }
                entries.push((k, c));
            }
            Ok(Submission::Boolean(CircuitSeries { entries }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Provenance;
    use crate::graph::{circuits_from_scores, RankBy, DEFAULT_GRID};
    use proptest::prelude::*;

    fn graph() -> Arc<ComputationGraph> {
        Arc::new(ComputationGraph::transformer(2, 2, 8))
    }

    #[test]
    fn boolean_round_trip_with_neurons() {
        let g = graph();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = Circuit::from_edges(g.clone(), [0, 3, 5]).unwrap();
        let src = g.edge(3).src;
        let c = c.with_neurons(src, [1, 2, 7].into_iter().collect()).unwrap();
        let meta = CircuitMeta {
            model: "m".into(),
            task: "t".into(),
            k: Some(0.1),
            provenance: Json::Null,
        };
        serialize_circuit(&c, &meta, &p).unwrap();
        let (back, m2) = parse_circuit(g, &p).unwrap();
        assert_eq!(back, c);
        assert_eq!(m2, meta);
    }

    #[test]
    fn mixed_values_rejected() {
        let g = graph();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let doc = serde_json::json!({
            "format": CIRCUIT_FORMAT, "version": 1, "model": "m", "task": "t",
            "edges": { g.edge_name(0): true, g.edge_name(1): 0.5 }
        });
        fs::write(&p, doc.to_string()).unwrap();
        assert!(matches!(parse_circuit(g, &p), Err(Error::CircuitFormat(_))));
    }

    #[test]
    fn unknown_edge_named() {
        let g = graph();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let doc = serde_json::json!({
            "format": CIRCUIT_FORMAT, "version": 1, "model": "m", "task": "t",
            "edges": { "head.9.9->logits.0.0": true }
        });
        fs::write(&p, doc.to_string()).unwrap();
        let err = parse_circuit(g, &p).unwrap_err().to_string();
        assert!(err.contains("head.9.9->logits.0.0"), "{err}");
    }

    #[test]
    fn score_submission_needs_exactly_one_file() {
        let g = graph();
        let dir = tempfile::tempdir().unwrap();
        let s = AttributionScores::new(g.clone(), vec![0.25; g.n_edges()], Provenance::named("t")).unwrap();
        let p = write_score_submission(dir.path(), "m", "t", &s).unwrap();
        let got = read_submission(dir.path(), "m", "t", g.clone(), &DEFAULT_GRID).unwrap();
        assert_eq!(got, Submission::Scores(s));
        fs::copy(&p, p.with_file_name("second.json")).unwrap();
        assert!(read_submission(dir.path(), "m", "t", g, &DEFAULT_GRID).is_err());
    }

    #[test]
    fn boolean_submission_missing_threshold_named() {
        let g = graph();
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f64> = (0..g.n_edges()).map(|i| i as f64).collect();
        let s = AttributionScores::new(g.clone(), vals, Provenance::named("t")).unwrap();
        let series = circuits_from_scores(&s, &DEFAULT_GRID, RankBy::Absolute).unwrap();
        let files = write_boolean_submission(dir.path(), "m", "t", &series, &Json::Null).unwrap();
        assert_eq!(files.len(), 9);
        let got = read_submission(dir.path(), "m", "t", g.clone(), &DEFAULT_GRID).unwrap();
        assert_eq!(got, Submission::Boolean(series));
        fs::remove_file(&files[4]).unwrap();
        let err = read_submission(dir.path(), "m", "t", g, &DEFAULT_GRID).unwrap_err().to_string();
        assert!(err.contains("k = 0.02"), "{err}");
    }

    proptest! {
        #[test]
        fn score_round_trip_is_exact(vals in proptest::collection::vec(-1e6f64..1e6, 24)) {
            let g = graph();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.json");
            let scores: Vec<f64> = (0..g.n_edges()).map(|i| vals[i % vals.len()] / 7.0).collect();
            let s = AttributionScores::new(g.clone(), scores, Provenance::named("t")).unwrap();
            serialize_scores(&s, "m", "t", &p).unwrap();
            let (c, _) = parse_circuit(g, &p).unwrap();
            prop_assert_eq!(c.scores().unwrap(), s.values());
        }
    }
}
