// SPDX-License-Identifier: MIT OR Apache-2.0

//! Provenance written next to every pipeline output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    /// Re-runs this pipeline into `<dir>`.
    rerun: String,
    config: Value,
    inputs: Value,
    /// Files written by the run, relative to the output directory.
    outputs: Vec<String>,
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if let Ok(rel) = p.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST_FILE {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Writes `config.toml` (when a run config is given) and `manifest.json`.
/// `extra` holds flags the rerun command needs beyond the config file.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: Option<&RunConfig>,
    extra: &[String],
    inputs: Value,
) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let (config_value, rerun) = match config {
        Some(c) => {
            let mut text = c.to_toml()?;
            if !text.ends_with('\n') {
                text.push('\n');
            }
            fs::write(dir.join(CONFIG_FILE), text)?;
            let mut v = serde_json::to_value(c)?;
            if let Some(o) = v.as_object_mut() {
                o.remove("output");
            }
            (v, format!("mib {command} --config {CONFIG_FILE} --out <dir>"))
        }
        None => (Value::Null, format!("mib {command}")),
    };
    let rerun = extra.iter().fold(rerun, |r, a| format!("{r} {a}"));
    let mut outputs = Vec::new();
    walk(dir, dir, &mut outputs)?;
    let m = Manifest {
        tool: "mib",
        version: env!("CARGO_PKG_VERSION"),
        command,
        rerun,
        config: config_value,
        inputs,
        outputs,
    };
    write_json(&dir.join(MANIFEST_FILE), &m)
}
