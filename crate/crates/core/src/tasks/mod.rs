// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks with fixed counterfactual pairings, their high-level causal
//! models, and line-delimited dataset files.
//!
//! Every template filler is a single vocabulary token. Counterfactuals are a
//! pure function of the prompt, the task and the split seed.

mod arithmetic;
mod attribute;
mod causal;
pub(crate) mod fixtures;
mod io;
mod ioi;
mod mcqa;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng, Fnv, Rng};

pub use arithmetic::{arithmetic_instance, gen_arithmetic, ArithmeticOp};
pub use attribute::{attribute_instance, gen_attribute, Attribute, EntityTable};
pub use causal::{CausalVariable, HighLevelCausalModel, Value};
pub use fixtures::{gen_copy, gen_planted, gen_xor, COPY_NAMES, PLANTED_FILLERS, XOR_NOISE_VARIANTS};
pub use io::{read_dataset, write_dataset, DATASET_FORMAT};
pub use ioi::{gen_ioi, gen_ioi_with, ioi_instance, IoiPools, IoiVariant};
pub use mcqa::{gen_mcqa, mcqa_instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Ioi,
    ArithmeticAdd,
    ArithmeticSub,
    Mcqa,
    Attribute,
    /// Ground-truth copy-head fixture.
    Copy,
    /// Ground-truth planted-direction fixture.
    Planted,
    /// Variable encoded as an XOR pattern of two directions.
    Xor,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::Ioi,
        TaskId::ArithmeticAdd,
        TaskId::ArithmeticSub,
        TaskId::Mcqa,
        TaskId::Attribute,
        TaskId::Copy,
        TaskId::Planted,
        TaskId::Xor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Ioi => "ioi",
            TaskId::ArithmeticAdd => "arithmetic-add",
            TaskId::ArithmeticSub => "arithmetic-sub",
            TaskId::Mcqa => "mcqa",
            TaskId::Attribute => "attribute",
            TaskId::Copy => "copy",
            TaskId::Planted => "planted",
            TaskId::Xor => "xor",
        }
    }

    pub fn vocab(self) -> Vocab {
        match self {
            TaskId::Ioi => ioi::vocab(&IoiPools::default()),
            TaskId::ArithmeticAdd | TaskId::ArithmeticSub => arithmetic::vocab(),
            TaskId::Mcqa => mcqa::vocab(),
            TaskId::Attribute => attribute::vocab(),
            TaskId::Copy => fixtures::copy_vocab(),
            TaskId::Planted => fixtures::planted_vocab(),
            TaskId::Xor => fixtures::xor_vocab(),
        }
    }

    pub fn causal_model(self) -> HighLevelCausalModel {
        match self {
            TaskId::Ioi => ioi::causal_model(),
            TaskId::ArithmeticAdd => arithmetic::causal_model(ArithmeticOp::Add),
            TaskId::ArithmeticSub => arithmetic::causal_model(ArithmeticOp::Sub),
            TaskId::Mcqa => mcqa::causal_model(),
            TaskId::Attribute => attribute::causal_model(),
            TaskId::Copy => fixtures::copy_causal_model(),
            TaskId::Planted => fixtures::planted_causal_model(),
            TaskId::Xor => fixtures::xor_causal_model(),
        }
    }

    /// Generates train/validation/test splits with `n` training instances.
    pub fn generate(self, n: usize, seed: u64) -> Result<DatasetSplit> {
        match self {
            TaskId::Ioi => gen_ioi(n, seed),
            TaskId::ArithmeticAdd => gen_arithmetic(n, ArithmeticOp::Add, seed),
            TaskId::ArithmeticSub => gen_arithmetic(n, ArithmeticOp::Sub, seed),
            TaskId::Mcqa => gen_mcqa(n, seed),
            TaskId::Attribute => gen_attribute(n, seed),
            TaskId::Copy => gen_copy(n, seed),
            TaskId::Planted => gen_planted(n, seed),
            TaskId::Xor => gen_xor(n, seed),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = TaskId::ALL.iter().map(|t| t.name()).collect();
                Error::invalid(format!("unknown task {s:?}; known: {}", names.join(", ")))
            })
    }
}

/// Word-level vocabulary; every word is one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub(crate) fn from_strs<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Self::new(words.into_iter().map(|w| w.as_ref().to_string()).collect()).expect("static vocabulary")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::invalid(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// A prompt, its answer, and the paired counterfactual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskId,
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub cf_tokens: Vec<usize>,
    pub cf_answer: usize,
    /// Template fillers and causal-model inputs, keyed by name.
    pub meta: BTreeMap<String, i64>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        if self.answer == self.cf_answer {
            return Err(Error::invalid("answer equals counterfactual answer"));
        }
        if self.tokens.len() != self.cf_tokens.len() {
            return Err(Error::invalid("prompt and counterfactual lengths differ"));
        }
        if self.tokens.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<i64> {
        self.meta
            .get(key)
            .copied()
            .ok_or_else(|| Error::invalid(format!("instance has no {key:?} field")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Validation,
    PublicTest,
    PrivateTest,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::Validation,
        SplitName::PublicTest,
        SplitName::PrivateTest,
    ];
}

/// Train, validation and test sets of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub task: TaskId,
    pub seed: u64,
    /// Name of the counterfactual construction used for every pair.
    pub cf_strategy: String,
    pub train: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
    pub public_test: Vec<TaskInstance>,
    pub private_test: Vec<TaskInstance>,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[TaskInstance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::PublicTest => &self.public_test,
            SplitName::PrivateTest => &self.private_test,
        }
    }

    pub(crate) fn split_mut(&mut self, name: SplitName) -> &mut Vec<TaskInstance> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Validation => &mut self.validation,
            SplitName::PublicTest => &mut self.public_test,
            SplitName::PrivateTest => &mut self.private_test,
        }
    }

    pub fn len(&self) -> usize {
        SplitName::ALL.iter().map(|&s| self.split(s).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stable hash of every instance, used in provenance records.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.bytes(self.task.name().as_bytes()).u64(self.seed);
        for s in SplitName::ALL {
            h.u64(dataset_fingerprint(self.split(s)));
        }
        h.finish()
    }
}

/// Stable hash of a list of instances.
pub fn dataset_fingerprint(data: &[TaskInstance]) -> u64 {
    let mut h = Fnv::new();
    for inst in data {
        h.bytes(inst.task.name().as_bytes());
        for &t in inst.tokens.iter().chain(&inst.cf_tokens) {
            h.u64(t as u64);
        }
        h.u64(inst.answer as u64).u64(inst.cf_answer as u64);
    }
    h.finish()
}

/// Sizes of the four splits for `n` training instances.
pub(crate) fn split_sizes(n: usize) -> [(SplitName, usize); 4] {
    let q = (n / 4).max(1);
    [
        (SplitName::Train, n),
        (SplitName::Validation, q),
        (SplitName::PublicTest, q),
        (SplitName::PrivateTest, q),
    ]
}

/// Per-split generator seed.
pub(crate) fn split_rng(task: TaskId, seed: u64, split: SplitName) -> Rng {
    let mut h = Fnv::new();
    h.bytes(task.name().as_bytes()).u64(seed).u64(split as u64);
    rng(h.finish())
}

/// RNG for the counterfactual of `tokens`; a pure function of prompt, task and seed.
pub(crate) fn cf_rng(task: TaskId, seed: u64, tokens: &[usize]) -> Rng {
    let mut h = Fnv::new();
    h.bytes(b"cf").bytes(task.name().as_bytes()).u64(seed);
    for &t in tokens {
        h.u64(t as u64);
    }
    rng(h.finish())
}

pub(crate) fn empty_split(task: TaskId, seed: u64, cf_strategy: &str) -> DatasetSplit {
    DatasetSplit {
        task,
        seed,
        cf_strategy: cf_strategy.into(),
        train: Vec::new(),
        validation: Vec::new(),
        public_test: Vec::new(),
        private_test: Vec::new(),
    }
}

pub(crate) fn meta(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}
