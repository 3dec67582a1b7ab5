// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tasks of the hand-wired ground-truth models.

use rand::Rng as _;

use super::{
    empty_split, meta, split_rng, split_sizes, CausalVariable, DatasetSplit, HighLevelCausalModel, TaskId,
    TaskInstance, Vocab,
};
use crate::error::{Error, Result};

pub const COPY_NAMES: [&str; 6] = ["Ann", "Ben", "Cid", "Dee", "Eli", "Fay"];
pub const PLANTED_FILLERS: usize = 4;
pub const XOR_NOISE_VARIANTS: usize = 8;

pub(super) fn copy_vocab() -> Vocab {
    Vocab::from_strs(COPY_NAMES)
}

pub(super) fn copy_causal_model() -> HighLevelCausalModel {
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("first"),
            CausalVariable::input("second"),
            CausalVariable::input("last"),
            CausalVariable::derived("O_Answer", &["first", "second", "last"], |v| {
                if v[2] == v[0] {
                    v[1]
                } else {
                    v[0]
                }
            }),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

/// "A B A" prompts answered by B; the counterfactual "A B B" is answered by A.
pub fn gen_copy(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let k = COPY_NAMES.len();
    let mut out = empty_split(TaskId::Copy, seed, "repeat-second");
    for (split, size) in split_sizes(n) {
        let mut r = split_rng(TaskId::Copy, seed, split);
        let list = out.split_mut(split);
        for _ in 0..size {
            let a = r.random_range(0..k);
            let b = (a + r.random_range(1..k)) % k;
            list.push(TaskInstance {
                task: TaskId::Copy,
                tokens: vec![a, b, a],
                answer: b,
                cf_tokens: vec![a, b, b],
                cf_answer: a,
                meta: meta(&[("first", a as i64), ("second", b as i64), ("last", a as i64)]),
            });
        }
    }
    Ok(out)
}

/// Token ids of the planted-direction vocabulary.
pub(crate) mod planted {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
    pub const FILLER0: usize = 2;
    pub const QUERY: usize = 6;
    pub const OUT_LEFT: usize = 7;
    pub const OUT_RIGHT: usize = 8;
    pub const VOCAB: usize = 9;
    pub const SEQ_LEN: usize = 4;
}

pub(super) fn planted_vocab() -> Vocab {
    Vocab::from_strs(["L", "R", "f0", "f1", "f2", "f3", "Q", "OL", "OR"])
}

pub(super) fn planted_causal_model() -> HighLevelCausalModel {
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("side"),
            CausalVariable::derived("O_Answer", &["side"], |v| planted::OUT_LEFT as i64 + v[0]),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

/// "s f f Q" prompts where the side token `s` decides the answer; the counterfactual flips `s`.
pub fn gen_planted(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut out = empty_split(TaskId::Planted, seed, "flip-side");
    for (split, size) in split_sizes(n) {
        let mut r = split_rng(TaskId::Planted, seed, split);
        let list = out.split_mut(split);
        for _ in 0..size {
            let side = r.random_range(0..2);
            let f1 = planted::FILLER0 + r.random_range(0..PLANTED_FILLERS);
            let f2 = planted::FILLER0 + r.random_range(0..PLANTED_FILLERS);
            list.push(TaskInstance {
                task: TaskId::Planted,
                tokens: vec![planted::LEFT + side, f1, f2, planted::QUERY],
                answer: planted::OUT_LEFT + side,
                cf_tokens: vec![planted::LEFT + 1 - side, f1, f2, planted::QUERY],
                cf_answer: planted::OUT_LEFT + 1 - side,
                meta: meta(&[("side", side as i64), ("f1", f1 as i64), ("f2", f2 as i64)]),
            });
        }
    }
    Ok(out)
}

/// Token ids of the XOR vocabulary.
pub(crate) mod xor {
    use super::XOR_NOISE_VARIANTS;

    pub const BOS: usize = 0;
    pub const SAME: usize = 1 + 4 * XOR_NOISE_VARIANTS;
    pub const DIFF: usize = SAME + 1;
    pub const VOCAB: usize = DIFF + 1;
    pub const SEQ_LEN: usize = 2;

    /// Token carrying bits `a`, `b` with noise variant `f`.
    pub fn token(a: usize, b: usize, f: usize) -> usize {
        1 + (2 * a + b) * XOR_NOISE_VARIANTS + f
    }
}

pub(super) fn xor_vocab() -> Vocab {
    let mut words = vec!["BOS".to_string()];
    for ab in 0..4 {
        for f in 0..XOR_NOISE_VARIANTS {
            words.push(format!("x{}{}_{f}", ab / 2, ab % 2));
        }
    }
    words.push("SAME".into());
    words.push("DIFF".into());
    Vocab::new(words).expect("distinct words")
}

pub(super) fn xor_causal_model() -> HighLevelCausalModel {
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("a"),
            CausalVariable::input("b"),
            CausalVariable::derived("O_Answer", &["a", "b"], |v| {
                if v[0] == v[1] {
                    xor::SAME as i64
                } else {
                    xor::DIFF as i64
                }
            }),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

/// "BOS x" prompts answered by whether the two bits of `x` agree; the counterfactual flips bit `a`.
pub fn gen_xor(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut out = empty_split(TaskId::Xor, seed, "flip-a");
    let answer = |a: usize, b: usize| if a == b { xor::SAME } else { xor::DIFF };
    for (split, size) in split_sizes(n) {
        let mut r = split_rng(TaskId::Xor, seed, split);
        let list = out.split_mut(split);
        for _ in 0..size {
            let a = r.random_range(0..2);
            let b = r.random_range(0..2);
            let f = r.random_range(0..XOR_NOISE_VARIANTS);
            list.push(TaskInstance {
                task: TaskId::Xor,
                tokens: vec![xor::BOS, xor::token(a, b, f)],
                answer: answer(a, b),
                cf_tokens: vec![xor::BOS, xor::token(1 - a, b, f)],
                cf_answer: answer(1 - a, b),
                meta: meta(&[("a", a as i64), ("b", b as i64), ("f", f as i64)]),
            });
        }
    }
    Ok(out)
}
