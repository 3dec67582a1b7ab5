// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{
    cf_rng, empty_split, meta, split_rng, split_sizes, CausalVariable, DatasetSplit, HighLevelCausalModel,
    SplitName, TaskId, TaskInstance, Vocab,
};
use crate::error::{Error, Result};
use crate::util::rng;

const WORDS: [&str; 7] = ["Q", ":", "?", "A", "country", "continent", "language"];
const N_ENTITIES: usize = 40;
/// Entities from this index on appear only in the private test split.
const PRIVATE_FROM: usize = 32;
const COUNTRIES: [&str; 8] = ["Avalor", "Brisa", "Corvia", "Dunmar", "Elset", "Fenwick", "Galdor", "Hestia"];
const CONTINENTS: [&str; 4] = ["Norland", "Sudland", "Ostland", "Westland"];
const LANGUAGES: [&str; 6] = ["Avic", "Brisan", "Corvish", "Dunic", "Elsetian", "Fennish"];
const TABLE_SEED: u64 = 0x5eed_7ab1e;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Country,
    Continent,
    Language,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Country, Attribute::Continent, Attribute::Language];

    fn word(self) -> &'static str {
        match self {
            Attribute::Country => "country",
            Attribute::Continent => "continent",
            Attribute::Language => "language",
        }
    }

    /// Causal variable holding this attribute of the queried entity.
    pub fn variable(self) -> &'static str {
        match self {
            Attribute::Country => "A_Country",
            Attribute::Continent => "A_Cont",
            Attribute::Language => "A_Lang",
        }
    }
}

/// Entity names and their independently sampled attribute values (as token ids).
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTable {
    pub names: Vec<String>,
    pub values: Vec<[usize; 3]>,
}

impl EntityTable {
    pub fn fixed() -> Self {
        let v = vocab();
        let mut r = rng(TABLE_SEED);
        let names: Vec<String> = (0..N_ENTITIES).map(|i| format!("E{i:02}")).collect();
        let values = (0..N_ENTITIES)
            .map(|_| {
                [
                    v.id(COUNTRIES.choose(&mut r).expect("non-empty")).expect("in vocab"),
                    v.id(CONTINENTS.choose(&mut r).expect("non-empty")).expect("in vocab"),
                    v.id(LANGUAGES.choose(&mut r).expect("non-empty")).expect("in vocab"),
                ]
            })
            .collect();
        Self { names, values }
    }

    pub fn value(&self, entity: usize, attr: Attribute) -> usize {
        self.values[entity][attr as usize]
    }
}

pub(super) fn vocab() -> Vocab {
    let entities = (0..N_ENTITIES).map(|i| format!("E{i:02}"));
    let words = WORDS
        .iter()
        .chain(&COUNTRIES)
        .chain(&CONTINENTS)
        .chain(&LANGUAGES)
        .map(|w| w.to_string())
        .chain(entities);
    Vocab::from_strs(words)
}

fn entity_token(e: usize) -> usize {
    WORDS.len() + COUNTRIES.len() + CONTINENTS.len() + LANGUAGES.len() + e
}

pub(super) fn causal_model() -> HighLevelCausalModel {
    let table = Arc::new(EntityTable::fixed());
    let lookup = |attr: Attribute| {
        let t = table.clone();
        move |v: &[i64]| t.value(v[0] as usize, attr) as i64
    };
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("entity"),
            CausalVariable::input("attr"),
            CausalVariable::derived("A_Country", &["entity"], lookup(Attribute::Country)),
            CausalVariable::derived("A_Cont", &["entity"], lookup(Attribute::Continent)),
            CausalVariable::derived("A_Lang", &["entity"], lookup(Attribute::Language)),
            CausalVariable::derived("O_Answer", &["attr", "A_Country", "A_Cont", "A_Lang"], |v| v[1 + v[0] as usize]),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

fn prompt(v: &Vocab, entity: usize, attr: Attribute) -> Vec<usize> {
    let w = |s: &str| v.id(s).expect("template word");
    vec![w("Q"), w(":"), entity_token(entity), w(attr.word()), w("?"), w("A"), w(":")]
}

/// Query of one attribute of `entity`; the counterfactual asks about `cf_entity`.
pub fn attribute_instance(entity: usize, attr: Attribute, cf_entity: usize) -> Result<TaskInstance> {
    let table = EntityTable::fixed();
    if entity >= N_ENTITIES || cf_entity >= N_ENTITIES {
        return Err(Error::invalid("entity index out of range"));
    }
    if table.value(entity, attr) == table.value(cf_entity, attr) {
        return Err(Error::invalid("counterfactual entity shares the queried attribute value"));
    }
    let v = vocab();
    Ok(TaskInstance {
        task: TaskId::Attribute,
        tokens: prompt(&v, entity, attr),
        answer: table.value(entity, attr),
        cf_tokens: prompt(&v, cf_entity, attr),
        cf_answer: table.value(cf_entity, attr),
        meta: meta(&[
            ("entity", entity as i64),
            ("attr", attr as i64),
            ("cf_entity", cf_entity as i64),
        ]),
    })
}

pub fn gen_attribute(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let table = EntityTable::fixed();
    let v = vocab();
    let mut out = empty_split(TaskId::Attribute, seed, "swap-entity");
    for (split, size) in split_sizes(n) {
        let pool: Vec<usize> = if split == SplitName::PrivateTest {
            (PRIVATE_FROM..N_ENTITIES).collect()
        } else {
            (0..PRIVATE_FROM).collect()
        };
        let mut r = split_rng(TaskId::Attribute, seed, split);
        let list = out.split_mut(split);
        while list.len() < size {
            let entity = *pool.choose(&mut r).expect("non-empty");
            let attr = Attribute::ALL[r.random_range(0..3)];
            let candidates: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&e| table.value(e, attr) != table.value(entity, attr))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let mut cr = cf_rng(TaskId::Attribute, seed, &prompt(&v, entity, attr));
            let cf_entity = candidates[cr.random_range(0..candidates.len())];
            list.push(attribute_instance(entity, attr, cf_entity)?);
        }
    }
    Ok(out)
}
