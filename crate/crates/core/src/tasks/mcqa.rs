// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::{
    cf_rng, empty_split, meta, split_rng, split_sizes, CausalVariable, DatasetSplit, HighLevelCausalModel,
    SplitName, TaskId, TaskInstance, Vocab,
};
use crate::error::{Error, Result};

const WORDS: [&str; 13] = ["The", "is", ".", "What", "color", "the", "?", "A", "B", "C", "D", "Answer", ":"];
const LETTER_BASE: usize = 7;
const COLORS: [&str; 10] = ["red", "blue", "green", "yellow", "black", "white", "purple", "orange", "pink", "brown"];
const OBJECTS: [&str; 12] = [
    "apple", "car", "shirt", "cup", "hat", "door", "ball", "chair",
    // held out for the private test split
    "boat", "fence", "vase", "tent",
];
const PRIVATE_FROM: usize = 8;

pub(super) fn vocab() -> Vocab {
    Vocab::from_strs(WORDS.iter().chain(&COLORS).chain(&OBJECTS))
}

pub(super) fn causal_model() -> HighLevelCausalModel {
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("X_Order"),
            CausalVariable::derived("O_Answer", &["X_Order"], |v| (LETTER_BASE as i64) + v[0]),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

fn prompt(v: &Vocab, obj: &str, color: &str, choices: &[&str; 4]) -> Result<Vec<usize>> {
    v.encode(&[
        "The", obj, "is", color, ".", "What", "color", "is", "the", obj, "?", "A", choices[0], "B", choices[1], "C",
        choices[2], "D", choices[3], "Answer", ":",
    ])
}

/// A multiple-choice color question; `choices[order]` must be `color`.
///
/// The counterfactual moves the correct color to position `cf_order` by
/// swapping two choices.
pub fn mcqa_instance(obj: &str, color: &str, choices: [&str; 4], cf_order: usize) -> Result<TaskInstance> {
    let v = vocab();
    let order = choices
        .iter()
        .position(|c| *c == color)
        .ok_or_else(|| Error::invalid("the correct color is not among the choices"))?;
    if cf_order >= 4 || cf_order == order {
        return Err(Error::invalid("counterfactual order must be another letter"));
    }
    let mut distinct = choices.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != 4 {
        return Err(Error::invalid("choices must be distinct"));
    }
    let mut cf = choices;
    cf.swap(order, cf_order);
    let mut m = meta(&[
        ("X_Order", order as i64),
        ("cf_order", cf_order as i64),
        ("obj", v.id(obj)? as i64),
        ("color", v.id(color)? as i64),
    ]);
    for (i, c) in choices.iter().enumerate() {
        m.insert(format!("choice{i}"), v.id(c)? as i64);
    }
    Ok(TaskInstance {
        task: TaskId::Mcqa,
        tokens: prompt(&v, obj, color, &choices)?,
        answer: LETTER_BASE + order,
        cf_tokens: prompt(&v, obj, color, &cf)?,
        cf_answer: LETTER_BASE + cf_order,
        meta: m,
    })
}

pub fn gen_mcqa(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut out = empty_split(TaskId::Mcqa, seed, "permute-correct-letter");
    for (split, size) in split_sizes(n) {
        let objects = if split == SplitName::PrivateTest {
            &OBJECTS[PRIVATE_FROM..]
        } else {
            &OBJECTS[..PRIVATE_FROM]
        };
        let mut r = split_rng(TaskId::Mcqa, seed, split);
        let list = out.split_mut(split);
        for _ in 0..size {
            let obj = *objects.choose(&mut r).expect("non-empty");
            let mut colors = COLORS.to_vec();
            colors.shuffle(&mut r);
            let choices = [colors[0], colors[1], colors[2], colors[3]];
            let color = choices[r.random_range(0..4)];
            let order = choices.iter().position(|c| *c == color).expect("present");
            let tokens = prompt(&vocab(), obj, color, &choices)?;
            let mut cr = cf_rng(TaskId::Mcqa, seed, &tokens);
            let cf_order = (order + cr.random_range(1..4)) % 4;
            list.push(mcqa_instance(obj, color, choices, cf_order)?);
        }
    }
    Ok(out)
}
