// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{
    empty_split, meta, split_rng, split_sizes, CausalVariable, DatasetSplit, HighLevelCausalModel,
    SplitName, TaskId, TaskInstance, Vocab,
};
use crate::error::{Error, Result};

const TEMPLATE_WORDS: [&str; 8] = ["When", "and", "went", "to", "the", ",", "gave", "an"];

const NAMES: [&str; 30] = [
    "Mary", "John", "Alice", "Bob", "Carol", "David", "Emma", "Frank", "Grace", "Henry", "Ivy", "Jack",
    "Kate", "Leo", "Mia", "Noah", "Olivia", "Paul", "Quinn", "Ruth", "Sam", "Tina", "Uma", "Victor",
    // held out for the private test split
    "Wendy", "Xavier", "Yara", "Zach", "Abel", "Bella",
];
const PLACES: [&str; 8] = ["store", "park", "school", "office", "garden", "station", "market", "library"];
const OBJECTS: [&str; 10] = [
    "apple", "book", "ring", "drink", "kite", "letter", "pencil", "basket",
    // held out for the private test split
    "lamp", "scarf",
];

/// Word order of the two names in the first clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoiVariant {
    /// Indirect object first: "When IO and S ..., S gave ...".
    Abb,
    /// Subject first: "When S and IO ..., S gave ...".
    Bab,
}

/// Filler pools; the private-test pools must be disjoint from the others.
#[derive(Debug, Clone, PartialEq)]
pub struct IoiPools {
    pub names: Vec<String>,
    pub private_names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub private_objects: Vec<String>,
}

impl Default for IoiPools {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            names: s(&NAMES[..24]),
            private_names: s(&NAMES[24..]),
            places: s(&PLACES),
            objects: s(&OBJECTS[..8]),
            private_objects: s(&OBJECTS[8..]),
        }
    }
}

pub(super) fn vocab(pools: &IoiPools) -> Vocab {
    let words = TEMPLATE_WORDS
        .iter()
        .map(|w| w.to_string())
        .chain(pools.names.iter().cloned())
        .chain(pools.private_names.iter().cloned())
        .chain(pools.places.iter().cloned())
        .chain(pools.objects.iter().cloned())
        .chain(pools.private_objects.iter().cloned());
    Vocab::from_strs(words)
}

pub(super) fn causal_model() -> HighLevelCausalModel {
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("io"),
            CausalVariable::input("s"),
            CausalVariable::derived("O_Answer", &["io"], |v| v[0]),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

fn sentence(vocab: &Vocab, first: &str, second: &str, place: &str, s2: &str, obj: &str) -> Result<Vec<usize>> {
    vocab.encode(&[
        "When", first, "and", second, "went", "to", "the", place, ",", s2, "gave", "an", obj, "to",
    ])
}

/// One IOI prompt built from explicit fillers under the default pools.
///
/// The counterfactual replaces the second subject mention with the indirect
/// object, so the answer becomes the subject.
pub fn ioi_instance(io: &str, s: &str, variant: IoiVariant, place: &str, obj: &str) -> Result<TaskInstance> {
    build(&vocab(&IoiPools::default()), io, s, variant, place, obj)
}

fn build(vocab: &Vocab, io: &str, s: &str, variant: IoiVariant, place: &str, obj: &str) -> Result<TaskInstance> {
    if io == s {
        return Err(Error::invalid("IOI needs two distinct names"));
    }
    let (first, second) = match variant {
        IoiVariant::Abb => (io, s),
        IoiVariant::Bab => (s, io),
    };
    let tokens = sentence(vocab, first, second, place, s, obj)?;
    let cf_tokens = sentence(vocab, first, second, place, io, obj)?;
    let io_id = vocab.id(io)? as i64;
    let s_id = vocab.id(s)? as i64;
    let (io_pos, s_pos) = match variant {
        IoiVariant::Abb => (1, 3),
        IoiVariant::Bab => (3, 1),
    };
    Ok(TaskInstance {
        task: TaskId::Ioi,
        tokens,
        answer: io_id as usize,
        cf_tokens,
        cf_answer: s_id as usize,
        meta: meta(&[
            ("io", io_id),
            ("s", s_id),
            ("io_pos", io_pos),
            ("s1_pos", s_pos),
            ("s2_pos", 9),
            ("place", vocab.id(place)? as i64),
            ("obj", vocab.id(obj)? as i64),
        ]),
    })
}

pub fn gen_ioi(n: usize, seed: u64) -> Result<DatasetSplit> {
    gen_ioi_with(n, seed, &IoiPools::default())
}

/// IOI splits from custom pools; private-test fillers never occur in the other splits.
pub fn gen_ioi_with(n: usize, seed: u64, pools: &IoiPools) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if pools.names.len() < 2 || pools.private_names.len() < 2 {
        return Err(Error::invalid(format!(
            "name pool too small for disjoint splits: {} shared and {} private names, need at least 2 each",
            pools.names.len(),
            pools.private_names.len()
        )));
    }
    if pools.places.is_empty() || pools.objects.is_empty() || pools.private_objects.is_empty() {
        return Err(Error::invalid("place and object pools must be non-empty"));
    }
    if pools.names.iter().any(|x| pools.private_names.contains(x))
        || pools.objects.iter().any(|x| pools.private_objects.contains(x))
    {
        return Err(Error::invalid("private-test pools overlap the shared pools"));
    }
    let vocab = vocab(pools);
    let mut out = empty_split(TaskId::Ioi, seed, "ioi-s2-to-io");
    for (split, size) in split_sizes(n) {
        let private = split == SplitName::PrivateTest;
        let names = if private { &pools.private_names } else { &pools.names };
        let objects = if private { &pools.private_objects } else { &pools.objects };
        let mut r = split_rng(TaskId::Ioi, seed, split);
        let list = out.split_mut(split);
        for _ in 0..size {
            let io = names.choose(&mut r).expect("non-empty");
            let s = loop {
                let c = names.choose(&mut r).expect("non-empty");
                if c != io {
                    break c;
                }
            };
            let variant = if r.random_bool(0.5) { IoiVariant::Abb } else { IoiVariant::Bab };
            let place = pools.places.choose(&mut r).expect("non-empty");
            let obj = objects.choose(&mut r).expect("non-empty");
            let inst = build(&vocab, io, s, variant, place, obj)?;
            list.push(inst);
        }
    }
    Ok(out)
}
