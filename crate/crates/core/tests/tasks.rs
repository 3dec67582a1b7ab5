// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use mib_core::tasks::*;
use mib_core::Error;
use proptest::prelude::*;

fn all_instances(d: &DatasetSplit) -> impl Iterator<Item = &TaskInstance> {
    SplitName::ALL.into_iter().flat_map(move |s| d.split(s).iter())
}

fn words(task: TaskId, ids: &[usize]) -> String {
    task.vocab().decode(ids)
}

#[test]
fn ioi_example_sentence() {
    let inst = ioi_instance("Mary", "John", IoiVariant::Abb, "store", "apple").unwrap();
    assert_eq!(
        words(TaskId::Ioi, &inst.tokens),
        "When Mary and John went to the store , John gave an apple to"
    );
    let v = TaskId::Ioi.vocab();
    assert_eq!(v.word(inst.answer), "Mary");
    assert_eq!(v.word(inst.cf_answer), "John");
    assert_ne!(inst.answer, inst.cf_answer);
    assert_eq!(inst.tokens.len(), inst.cf_tokens.len());
    assert!(ioi_instance("Mary", "Mary", IoiVariant::Abb, "store", "apple").is_err());
}

#[test]
fn ioi_full_scale_train_size() {
    let d = gen_ioi(10_000, 0).unwrap();
    assert_eq!(d.train.len(), 10_000);
    assert!(d.train.iter().all(|i| i.validate().is_ok()));
}

#[test]
fn ioi_rejects_small_name_pools() {
    let pools = IoiPools {
        private_names: vec!["Wendy".into()],
        ..IoiPools::default()
    };
    let err = gen_ioi_with(10, 0, &pools).unwrap_err();
    assert!(err.to_string().contains("name pool too small"), "{err}");
    let overlap = IoiPools {
        private_names: vec!["Mary".into(), "Wendy".into()],
        ..IoiPools::default()
    };
    assert!(gen_ioi_with(10, 0, &overlap).is_err());
}

#[test]
fn arithmetic_examples() {
    let v = TaskId::ArithmeticAdd.vocab();
    let inst = arithmetic_instance(ArithmeticOp::Add, 13, 25, 0).unwrap();
    assert_eq!(words(TaskId::ArithmeticAdd, &inst.tokens), "What is the sum of 13 and 25 ?");
    assert_eq!(v.word(inst.answer), "38");
    assert_eq!(inst.meta("X_Carry").unwrap(), 0);
    assert_eq!(arithmetic_instance(ArithmeticOp::Add, 17, 25, 0).unwrap().meta("X_Carry").unwrap(), 1);

    let cm = TaskId::ArithmeticAdd.causal_model();
    let vals = cm.run(&inst, &BTreeMap::new()).unwrap();
    assert_eq!(vals["X_Carry"], 0);
    // the counterfactual flips the carry: 13+25 has units 3+5, so one units digit moves past 10
    let cf_a = inst.meta("cf_a").unwrap();
    let cf_b = inst.meta("cf_b").unwrap();
    assert!(cf_a % 10 + cf_b % 10 >= 10);
    assert_eq!(inst.meta("cf_flipped").unwrap(), 1);
    assert_eq!(v.word(inst.cf_answer), (cf_a + cf_b).to_string());

    let sub = arithmetic_instance(ArithmeticOp::Sub, 42, 17, 0).unwrap();
    assert_eq!(TaskId::ArithmeticSub.vocab().word(sub.answer), "25");
    assert_eq!(sub.meta("X_Borrow").unwrap(), 1);
    assert!(arithmetic_instance(ArithmeticOp::Sub, 3, 7, 0).is_err());
    assert!(arithmetic_instance(ArithmeticOp::Add, 100, 7, 0).is_err());
}

#[test]
fn arithmetic_carry_interchange() {
    let cm = TaskId::ArithmeticAdd.causal_model();
    let v = TaskId::ArithmeticAdd.vocab();
    let base = arithmetic_instance(ArithmeticOp::Add, 13, 25, 0).unwrap();
    let source = arithmetic_instance(ArithmeticOp::Add, 17, 25, 0).unwrap();
    // forcing a carry into 13+25 adds ten to the tens digit: 48
    let out = cm.expected_output(&base, &source, "X_Carry").unwrap();
    assert_eq!(v.word(out), "48");
    // fixing b to its source value is a no-op when the sources agree
    assert_eq!(cm.expected_output(&base, &source, "b").unwrap(), base.answer);
    let other = arithmetic_instance(ArithmeticOp::Add, 10, 30, 0).unwrap();
    // b = 30 with a = 13 and no carry recomputed from units 3 + 0
    assert_eq!(v.word(cm.expected_output(&base, &other, "b").unwrap()), "43");
    assert!(cm.expected_output(&base, &source, "X_Borrow").is_err());
}

#[test]
fn arithmetic_full_scale_sub_split() {
    let d = gen_arithmetic(17_400, ArithmeticOp::Sub, 0).unwrap();
    assert_eq!(d.train.len(), 17_400);
    let v = TaskId::ArithmeticSub.vocab();
    for inst in d.train.iter().take(500) {
        let (a, b) = (inst.meta("a").unwrap(), inst.meta("b").unwrap());
        assert!(a >= b);
        assert_eq!(v.word(inst.answer), (a - b).to_string());
    }
}

#[test]
fn mcqa_examples() {
    let v = TaskId::Mcqa.vocab();
    let inst = mcqa_instance("apple", "red", ["blue", "green", "yellow", "red"], 1).unwrap();
    assert_eq!(
        words(TaskId::Mcqa, &inst.tokens),
        "The apple is red . What color is the apple ? A blue B green C yellow D red Answer :"
    );
    assert_eq!(v.word(inst.answer), "D");
    assert_eq!(v.word(inst.cf_answer), "B");
    assert_eq!(
        words(TaskId::Mcqa, &inst.cf_tokens),
        "The apple is red . What color is the apple ? A blue B red C yellow D green Answer :"
    );

    let cm = TaskId::Mcqa.causal_model();
    let source = mcqa_instance("cup", "pink", ["pink", "black", "white", "brown"], 2).unwrap();
    assert_eq!(v.word(source.answer), "A");
    assert_eq!(v.word(cm.expected_output(&inst, &source, "X_Order").unwrap()), "A");
    assert_eq!(v.word(cm.expected_output(&inst, &source, "O_Answer").unwrap()), "A");

    assert!(mcqa_instance("apple", "red", ["blue", "green", "yellow", "pink"], 1).is_err());
    assert!(mcqa_instance("apple", "red", ["blue", "green", "yellow", "red"], 3).is_err());
    assert!(mcqa_instance("apple", "red", ["blue", "blue", "yellow", "red"], 0).is_err());
}

#[test]
fn attribute_examples() {
    let table = EntityTable::fixed();
    let v = TaskId::Attribute.vocab();
    let (e, other) = (0..32)
        .flat_map(|a| (0..32).map(move |b| (a, b)))
        .find(|&(a, b)| {
            table.value(a, Attribute::Continent) != table.value(b, Attribute::Continent)
                && table.value(a, Attribute::Country) != table.value(b, Attribute::Country)
        })
        .unwrap();
    let inst = attribute_instance(e, Attribute::Continent, other).unwrap();
    assert_eq!(
        words(TaskId::Attribute, &inst.tokens),
        format!("Q : {} continent ? A :", table.names[e])
    );
    assert_eq!(inst.answer, table.value(e, Attribute::Continent));
    assert!(["Norland", "Sudland", "Ostland", "Westland"].contains(&v.word(inst.answer)));

    let cm = TaskId::Attribute.causal_model();
    let src = attribute_instance(other, Attribute::Country, e).unwrap();
    // continent interchange moves the continent answer
    assert_eq!(
        cm.expected_output(&inst, &src, "A_Cont").unwrap(),
        table.value(other, Attribute::Continent)
    );
    // but a country query ignores it
    let country = attribute_instance(e, Attribute::Country, other).unwrap();
    assert_eq!(cm.expected_output(&country, &src, "A_Cont").unwrap(), country.answer);
    assert_eq!(
        cm.expected_output(&country, &src, "A_Country").unwrap(),
        table.value(other, Attribute::Country)
    );

    let same = (0..40).find(|&b| b != e && table.value(b, Attribute::Language) == table.value(e, Attribute::Language));
    if let Some(b) = same {
        assert!(attribute_instance(e, Attribute::Language, b).is_err());
    }
}

#[test]
fn attribute_desk_scale() {
    let d = gen_attribute(5000, 0).unwrap();
    assert_eq!(d.train.len(), 5000);
}

#[test]
fn every_task_is_consistent_with_its_causal_model() {
    for task in TaskId::ALL {
        let d = task.generate(200, 3).unwrap();
        let cm = task.causal_model();
        let vocab = task.vocab();
        for inst in all_instances(&d) {
            inst.validate().unwrap();
            assert_eq!(inst.task, task);
            assert_eq!(cm.answer(inst).unwrap(), inst.answer, "{task}");
            assert!(inst.tokens.iter().chain(&inst.cf_tokens).all(|&t| t < vocab.len()));
            assert!(inst.answer < vocab.len() && inst.cf_answer < vocab.len());
        }
    }
}

#[test]
fn generation_is_deterministic() {
    for task in TaskId::ALL {
        let a = task.generate(100, 7).unwrap();
        let b = task.generate(100, 7).unwrap();
        assert_eq!(a, b, "{task}");
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = task.generate(100, 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint(), "{task}");
    }
}

#[test]
fn counterfactuals_depend_only_on_the_prompt() {
    for task in TaskId::ALL {
        let d = task.generate(300, 1).unwrap();
        let mut seen: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for inst in all_instances(&d) {
            if let Some(cf) = seen.insert(inst.tokens.clone(), inst.cf_tokens.clone()) {
                assert_eq!(cf, inst.cf_tokens, "{task}");
            }
        }
    }
}

/// Filler values that identify an instance's template slots.
fn fillers(task: TaskId, inst: &TaskInstance) -> Vec<i64> {
    let keys: &[&str] = match task {
        TaskId::Ioi => &["io", "s", "obj"],
        TaskId::Mcqa => &["obj"],
        TaskId::Attribute => &["entity", "cf_entity"],
        TaskId::ArithmeticAdd | TaskId::ArithmeticSub => {
            return vec![inst.meta("a").unwrap() * 100 + inst.meta("b").unwrap()]
        }
        _ => &[],
    };
    keys.iter().map(|k| inst.meta(k).unwrap()).collect()
}

#[test]
fn private_test_fillers_never_appear_in_train() {
    for task in [TaskId::Ioi, TaskId::Mcqa, TaskId::Attribute, TaskId::ArithmeticAdd, TaskId::ArithmeticSub] {
        let d = task.generate(2000, 0).unwrap();
        let train: BTreeSet<i64> = d.train.iter().flat_map(|i| fillers(task, i)).collect();
        for inst in &d.private_test {
            for f in fillers(task, inst) {
                assert!(!train.contains(&f), "{task}: filler {f}");
            }
        }
    }
}

#[test]
fn desk_scale_split_sizes() {
    let d = gen_mcqa(2000, 0).unwrap();
    assert_eq!(
        (d.train.len(), d.validation.len(), d.public_test.len(), d.private_test.len()),
        (2000, 500, 500, 500)
    );
    assert_eq!(d.len(), 3500);
    assert!(!d.cf_strategy.is_empty());
    assert!(TaskId::Ioi.generate(0, 0).is_err());
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for task in TaskId::ALL {
        let d = task.generate(100, 2).unwrap();
        let path = dir.path().join(format!("{task}.jsonl"));
        write_dataset(&d, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), d);
    }
    let text = std::fs::read_to_string(dir.path().join("ioi.jsonl")).unwrap();
    let line = text.lines().nth(1).unwrap();
    for key in ["\"task\"", "\"tokens\"", "\"answer\"", "\"cf_tokens\"", "\"cf_answer\"", "\"meta\""] {
        assert!(line.contains(key), "{key}");
    }
}

#[test]
fn malformed_records_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen_ioi(8, 0).unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&d, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();

    // y == y' on the third line
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    rec["cf_answer"] = rec["answer"].clone();
    lines[2] = rec.to_string();
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_dataset(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        e => panic!("{e}"),
    }

    lines[2] = "{not json".into();
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_dataset(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        e => panic!("{e}"),
    }
}

#[test]
fn causal_model_construction_is_checked() {
    assert!(HighLevelCausalModel::new(vec![CausalVariable::derived("y", &["x"], |v| v[0])], "y").is_err());
    assert!(HighLevelCausalModel::new(vec![CausalVariable::input("x"), CausalVariable::input("x")], "x").is_err());
    assert!(HighLevelCausalModel::new(vec![CausalVariable::input("x")], "y").is_err());
    let cm = TaskId::Ioi.causal_model();
    let inst = gen_ioi(4, 0).unwrap().train[0].clone();
    assert!(cm.expected_output(&inst, &inst, "nope").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn arithmetic_causal_model_reproduces_sums(a in 0i64..100, b in 0i64..100, seed in 0u64..50) {
        let inst = arithmetic_instance(ArithmeticOp::Add, a, b, seed).unwrap();
        let cm = TaskId::ArithmeticAdd.causal_model();
        prop_assert_eq!(cm.answer(&inst).unwrap(), inst.answer);
        let v = TaskId::ArithmeticAdd.vocab();
        prop_assert_eq!(v.word(inst.answer), (a + b).to_string());
        inst.validate().unwrap();
    }

    #[test]
    fn subtraction_counterfactuals_flip_the_borrow_when_possible(a in 0i64..100, b in 0i64..100) {
        let (a, b) = if a < b { (b, a) } else { (a, b) };
        let inst = arithmetic_instance(ArithmeticOp::Sub, a, b, 0).unwrap();
        let (ca, cb) = (inst.meta("cf_a").unwrap(), inst.meta("cf_b").unwrap());
        prop_assert!(ca >= cb);
        prop_assert!(ca == a || cb == b);
        if inst.meta("cf_flipped").unwrap() == 1 {
            prop_assert_ne!(i64::from(ca % 10 < cb % 10), inst.meta("X_Borrow").unwrap());
        }
        inst.validate().unwrap();
    }

    #[test]
    fn mcqa_counterfactual_moves_the_answer(order in 0usize..4, shift in 1usize..4) {
        let mut choices = ["red", "blue", "green", "black"];
        choices.swap(0, order);
        let cf = (order + shift) % 4;
        let inst = mcqa_instance("hat", "red", choices, cf).unwrap();
        prop_assert_eq!(inst.meta("X_Order").unwrap() as usize, order);
        prop_assert_eq!(inst.cf_answer as i64 - inst.answer as i64, cf as i64 - order as i64);
    }
}
