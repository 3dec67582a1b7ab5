// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{empty_split, DatasetSplit, SplitName, TaskId, TaskInstance};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "mib-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task: TaskId,
    seed: u64,
    cf_strategy: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: TaskId,
    split: SplitName,
    tokens: Vec<usize>,
    answer: usize,
    cf_tokens: Vec<usize>,
    cf_answer: usize,
    meta: BTreeMap<String, i64>,
}

/// Writes a header line followed by one JSON record per instance.
pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        task: split.task,
        seed: split.seed,
        cf_strategy: split.cf_strategy.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for name in SplitName::ALL {
        for inst in split.split(name) {
            let rec = Record {
                task: inst.task,
                split: name,
                tokens: inst.tokens.clone(),
                answer: inst.answer,
                cf_tokens: inst.cf_tokens.clone(),
                cf_answer: inst.cf_answer,
                meta: inst.meta.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<DatasetSplit> {
    let reader = BufReader::new(File::open(path)?);
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut out = empty_split(header.task, header.seed, &header.cf_strategy);
    for (i, line) in lines {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        if rec.task != header.task {
            return Err(err(n, format!("record task {} differs from header task {}", rec.task, header.task)));
        }
        let inst = TaskInstance {
            task: rec.task,
            tokens: rec.tokens,
            answer: rec.answer,
            cf_tokens: rec.cf_tokens,
            cf_answer: rec.cf_answer,
            meta: rec.meta,
        };
        inst.validate().map_err(|e| err(n, e.to_string()))?;
        out.split_mut(rec.split).push(inst);
    }
    Ok(out)
}
