// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng as _;

use super::{
    cf_rng, empty_split, meta, split_rng, split_sizes, CausalVariable, DatasetSplit, HighLevelCausalModel,
    SplitName, TaskId, TaskInstance, Vocab,
};
use crate::error::{Error, Result};
use crate::util::Fnv;

/// Smallest and largest number token; negative values only arise under interventions.
const MIN_NUMBER: i64 = -10;
const MAX_NUMBER: i64 = 199;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithmeticOp {
    Add,
    Sub,
}

impl ArithmeticOp {
    fn task(self) -> TaskId {
        match self {
            ArithmeticOp::Add => TaskId::ArithmeticAdd,
            ArithmeticOp::Sub => TaskId::ArithmeticSub,
        }
    }

    fn word(self) -> &'static str {
        match self {
            ArithmeticOp::Add => "sum",
            ArithmeticOp::Sub => "difference",
        }
    }

    fn flag_name(self) -> &'static str {
        match self {
            ArithmeticOp::Add => "X_Carry",
            ArithmeticOp::Sub => "X_Borrow",
        }
    }
}

pub(super) fn vocab() -> Vocab {
    let words = ["What", "is", "the", "sum", "difference", "of", "and", "?"]
        .iter()
        .map(|w| w.to_string())
        .chain((MIN_NUMBER..=MAX_NUMBER).map(|n| n.to_string()));
    Vocab::from_strs(words)
}

fn number_token(n: i64) -> i64 {
    // words precede the numbers in the vocabulary
    8 + (n - MIN_NUMBER)
}

fn flag(op: ArithmeticOp, a: i64, b: i64) -> i64 {
    match op {
        ArithmeticOp::Add => i64::from(a % 10 + b % 10 >= 10),
        ArithmeticOp::Sub => i64::from(a % 10 < b % 10),
    }
}

/// Result assembled digit-wise from tens, units and the carry/borrow flag.
fn combine(op: ArithmeticOp, a: i64, b: i64, f: i64) -> i64 {
    match op {
        ArithmeticOp::Add => 10 * (a / 10 + b / 10 + f) + (a % 10 + b % 10) % 10,
        ArithmeticOp::Sub => 10 * (a / 10 - b / 10 - f) + (a % 10 - b % 10 + 10) % 10,
    }
}

pub(super) fn causal_model(op: ArithmeticOp) -> HighLevelCausalModel {
    let name = op.flag_name();
    HighLevelCausalModel::new(
        vec![
            CausalVariable::input("a"),
            CausalVariable::input("b"),
            CausalVariable::derived(name, &["a", "b"], move |v| flag(op, v[0], v[1])),
            CausalVariable::derived("O_Answer", &["a", "b", name], move |v| {
                number_token(combine(op, v[0], v[1], v[2]).clamp(MIN_NUMBER, MAX_NUMBER))
            }),
        ],
        "O_Answer",
    )
    .expect("static causal model")
}

fn prompt(op: ArithmeticOp, a: i64, b: i64) -> Vec<usize> {
    let v = |w: &str| match w {
        "What" => 0,
        "is" => 1,
        "the" => 2,
        "sum" => 3,
        "difference" => 4,
        "of" => 5,
        "and" => 6,
        _ => 7,
    };
    vec![
        v("What"),
        v("is"),
        v("the"),
        v(op.word()),
        v("of"),
        number_token(a) as usize,
        v("and"),
        number_token(b) as usize,
        v("?"),
    ]
}

fn answer(op: ArithmeticOp, a: i64, b: i64) -> i64 {
    match op {
        ArithmeticOp::Add => a + b,
        ArithmeticOp::Sub => a - b,
    }
}

/// Operand pair for the counterfactual: a units digit changes so the flag flips when possible.
fn counterfactual(op: ArithmeticOp, a: i64, b: i64, r: &mut impl rand::Rng) -> (i64, i64, bool) {
    let f = flag(op, a, b);
    let valid = |x: i64, y: i64| op == ArithmeticOp::Add || x >= y;
    let mut flips = Vec::new();
    let mut others = Vec::new();
    for u in 0..10 {
        for (x, y) in [(a, 10 * (b / 10) + u), (10 * (a / 10) + u, b)] {
            if (x, y) == (a, b) || !valid(x, y) || answer(op, x, y) == answer(op, a, b) {
                continue;
            }
            if flag(op, x, y) != f {
                flips.push((x, y));
            } else {
                others.push((x, y));
            }
        }
    }
    flips.sort_unstable();
    flips.dedup();
    others.sort_unstable();
    others.dedup();
    if !flips.is_empty() {
        let (x, y) = flips[r.random_range(0..flips.len())];
        (x, y, true)
    } else {
        let (x, y) = others[r.random_range(0..others.len())];
        (x, y, false)
    }
}

/// One arithmetic prompt "What is the sum|difference of a and b ?".
pub fn arithmetic_instance(op: ArithmeticOp, a: i64, b: i64, seed: u64) -> Result<TaskInstance> {
    if !(0..=99).contains(&a) || !(0..=99).contains(&b) {
        return Err(Error::invalid("operands must lie in 0..=99"));
    }
    if op == ArithmeticOp::Sub && a < b {
        return Err(Error::invalid("subtraction needs a >= b"));
    }
    let tokens = prompt(op, a, b);
    let mut r = cf_rng(op.task(), seed, &tokens);
    let (ca, cb, flipped) = counterfactual(op, a, b, &mut r);
    Ok(TaskInstance {
        task: op.task(),
        answer: number_token(answer(op, a, b)) as usize,
        cf_tokens: prompt(op, ca, cb),
        cf_answer: number_token(answer(op, ca, cb)) as usize,
        tokens,
        meta: meta(&[
            ("a", a),
            ("b", b),
            ("cf_a", ca),
            ("cf_b", cb),
            (op.flag_name(), flag(op, a, b)),
            ("cf_flipped", i64::from(flipped)),
        ]),
    })
}

/// Operand pairs reserved for the private test split.
fn is_private(a: i64, b: i64) -> bool {
    let mut h = Fnv::new();
    h.u64(a as u64).u64(b as u64);
    h.finish() % 5 == 0
}

pub fn gen_arithmetic(n: usize, op: ArithmeticOp, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut out = empty_split(op.task(), seed, "units-digit-flag-flip");
    for (split, size) in split_sizes(n) {
        let mut r = split_rng(op.task(), seed, split);
        let want_private = split == SplitName::PrivateTest;
        let list = out.split_mut(split);
        while list.len() < size {
            let a = r.random_range(0..=99);
            let b = r.random_range(0..=99);
            let (a, b) = if op == ArithmeticOp::Sub && a < b { (b, a) } else { (a, b) };
            if is_private(a, b) != want_private {
                continue;
            }
            list.push(arithmetic_instance(op, a, b, seed)?);
        }
    }
    Ok(out)
}
