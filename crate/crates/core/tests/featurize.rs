// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use mib_core::autodiff::finite_difference_check;
use mib_core::featurize::*;
use mib_core::model::{build_ground_truth_model, GroundTruthKind, GroundTruthModel, ModelConfig, TransformerModel};
use mib_core::tasks::{gen_planted, gen_xor, DatasetSplit, TaskId};
use mib_core::Error;
use proptest::prelude::*;

struct Fixture {
    gt: GroundTruthModel,
    data: DatasetSplit,
    train: PairSet,
    test: PairSet,
    site: InterventionSite,
}

fn planted_fixture(kind: GroundTruthKind) -> Fixture {
    let gt = build_ground_truth_model(kind, 0);
    let data = gen_planted(400, 0).unwrap();
    let cm = TaskId::Planted.causal_model();
    let train = PairSet::sample(&data.train, &cm, "side", 256, 1).unwrap();
    let test = PairSet::sample(&data.validation, &cm, "side", 500, 2).unwrap();
    let dir = gt.direction.clone().unwrap();
    let site = InterventionSite::residual(dir.layer, PositionSelector::Fixed { index: dir.position });
    Fixture {
        gt,
        data,
        train,
        test,
        site,
    }
}

fn planted() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| planted_fixture(GroundTruthKind::PlantedDirection))
}

fn xor() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let gt = build_ground_truth_model(GroundTruthKind::Xor, 0);
        let data = gen_xor(400, 0).unwrap();
        let cm = TaskId::Xor.causal_model();
        let train = PairSet::sample(&data.train, &cm, "a", 256, 1).unwrap();
        let test = PairSet::sample(&data.validation, &cm, "a", 500, 2).unwrap();
        Fixture {
            gt,
            data,
            train,
            test,
            site: InterventionSite::residual(0, PositionSelector::Last),
        }
    })
}

fn planted_das() -> &'static AlignmentArtifact {
    static A: OnceLock<AlignmentArtifact> = OnceLock::new();
    A.get_or_init(|| {
        let f = planted();
        train_das(&f.gt.model, f.site, &f.train, 1, &FeaturizeConfig::default()).unwrap()
    })
}

fn random_model() -> TransformerModel {
    let mut cfg = ModelConfig::new(2, 2, 4, 12, 6);
    cfg.seed = 5;
    TransformerModel::init(cfg).unwrap()
}

fn with_featurizer(model: &TransformerModel, f: Featurizer, pi: FeatureIndices, site: InterventionSite) -> AlignmentArtifact {
    AlignmentArtifact::new(model, f, pi, site, "side", TrainingProvenance::default()).unwrap()
}

/// Householder reflection whose first column is the unit vector `u`.
fn rotation_onto(u: &[f64]) -> Vec<f64> {
    let d = u.len();
    let v: Vec<f64> = (0..d).map(|i| f64::from(u8::from(i == 0)) - u[i]).collect();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            q[i * d + j] = f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / vv;
        }
    }
    q
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn full_vector_collapse_is_bit_exact() {
    let model = random_model();
    let sites = [
        InterventionSite::residual(0, PositionSelector::Last),
        InterventionSite::residual(1, PositionSelector::Fixed { index: 2 }),
        InterventionSite::residual(2, PositionSelector::FromEnd { offset: 1 }),
        InterventionSite::head(1, 1, PositionSelector::Fixed { index: 3 }),
    ];
    let base = [1, 4, 2, 7, 3, 9];
    let source = [5, 0, 11, 6, 3, 2];
    for site in sites {
        let a = AlignmentArtifact::full_vector(&model, site, "x").unwrap();
        let (hc, _) = capture(&model, &source, &site).unwrap();
        let direct = patch_site(&model, &base, &site, &hc).unwrap();
        let via = interchange_logits(&model, &base, &source, &a).unwrap();
        assert_eq!(direct.data(), via.data(), "{site}");
    }
    // at the final residual, the whole-vector patch reproduces the source output
    let f = planted();
    let full = AlignmentArtifact::full_vector(&f.gt.model, f.site, "side").unwrap();
    assert_eq!(faithfulness_score(&f.gt.model, &full, &f.test).unwrap(), 1.0);
}

#[test]
fn patching_the_clean_value_changes_nothing() {
    let model = random_model();
    let base = [3, 1, 4, 1, 5, 9];
    let site = InterventionSite::residual(1, PositionSelector::Last);
    let (h, _) = capture(&model, &base, &site).unwrap();
    let a = patch_site(&model, &base, &site, &h).unwrap();
    assert_eq!(a.data(), model.forward(&base).unwrap().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn empty_pi_is_a_no_op(
        base in proptest::collection::vec(0usize..12, 6),
        source in proptest::collection::vec(0usize..12, 6),
        seed in 0u64..1000,
        layer in 0usize..3,
    ) {
        let model = random_model();
        let site = InterventionSite::residual(layer, PositionSelector::Last);
        let f = Featurizer::random_orthogonal(model.config().d_model, seed);
        let a = with_featurizer(&model, f, FeatureIndices::empty(), site);
        let got = interchange_logits(&model, &base, &source, &a).unwrap();
        let plain = model.forward(&base).unwrap();
        prop_assert_eq!(got.data(), plain.data());
    }

    #[test]
    fn orthogonal_round_trip_is_exact(seed in 0u64..1000, width in 1usize..24) {
        let f = Featurizer::random_orthogonal(width, seed);
        prop_assert!(f.gram_deviation() < 1e-10);
        let probes: Vec<Vec<f64>> = (0..5)
            .map(|k| (0..width).map(|i| ((i * 7 + k * 3) % 11) as f64 - 5.0).collect())
            .collect();
        prop_assert!(f.round_trip_error(&probes).unwrap() < 1e-10);
    }
}

#[test]
fn identity_round_trip_is_exact() {
    let f = Featurizer::identity(6);
    let probes = vec![vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]];
    assert_eq!(f.round_trip_error(&probes).unwrap(), 0.0);
}

#[test]
fn planted_rotation_flips_every_pair() {
    let f = planted();
    let u = &f.gt.direction.as_ref().unwrap().vector;
    let feat = Featurizer::orthogonal(FeaturizerKind::Orthogonal, u.len(), rotation_onto(u)).unwrap();
    let a = with_featurizer(&f.gt.model, feat, FeatureIndices::leading(1), f.site);
    for p in &f.test.pairs {
        assert_eq!(interchange_intervene(&f.gt.model, &p.base, &p.source, &a).unwrap(), p.expected);
    }
    assert_eq!(faithfulness_score(&f.gt.model, &a, &f.test).unwrap(), 1.0);
}

#[test]
fn empty_pi_scores_one_when_nothing_should_change() {
    let f = planted();
    let cm = TaskId::Planted.causal_model();
    let pairs = PairSet {
        variable: "side".into(),
        pairs: f.data.validation[..50]
            .iter()
            .map(|inst| InterchangePair {
                base: inst.tokens.clone(),
                source: inst.tokens.clone(),
                expected: cm.expected_output(inst, inst, "side").unwrap(),
            })
            .collect(),
    };
    let d = f.gt.model.config().d_model;
    let a = with_featurizer(&f.gt.model, Featurizer::identity(d), FeatureIndices::empty(), f.site);
    assert_eq!(faithfulness_score(&f.gt.model, &a, &pairs).unwrap(), 1.0);
}

#[test]
fn random_rotation_baseline_stays_near_chance() {
    let f = planted();
    let d = f.gt.model.config().d_model;
    for seed in 0..5 {
        let a = with_featurizer(
            &f.gt.model,
            Featurizer::random_orthogonal(d, seed),
            FeatureIndices::leading(1),
            f.site,
        );
        let s = faithfulness_score(&f.gt.model, &a, &f.test).unwrap();
        assert!(s <= 0.6, "seed {seed}: {s}");
    }
}

#[test]
fn das_recovers_the_planted_direction() {
    let f = planted();
    let a = planted_das();
    let u = &f.gt.direction.as_ref().unwrap().vector;
    let cos = cosine(&a.featurizer.direction(0).unwrap(), u).abs();
    assert!(cos >= 0.99, "cos {cos}");
    let s = faithfulness_score(&f.gt.model, a, &f.test).unwrap();
    assert!(s >= 0.99, "faithfulness {s}");
    assert!(a.featurizer.gram_deviation() < 1e-6);
    let worst: f64 = a.provenance.notes[0]
        .strip_prefix("max gram deviation ")
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-6);
}

#[test]
fn das_at_full_width_contains_the_full_vector_baseline() {
    for f in [planted(), xor()] {
        let d = f.gt.model.config().d_model;
        let cfg = FeaturizeConfig {
            steps: 20,
            ..FeaturizeConfig::default()
        };
        let a = train_das(&f.gt.model, f.site, &f.train, d, &cfg).unwrap();
        let full = AlignmentArtifact::full_vector(&f.gt.model, f.site, &f.train.variable).unwrap();
        let das = faithfulness_score(&f.gt.model, &a, &f.test).unwrap();
        let base = faithfulness_score(&f.gt.model, &full, &f.test).unwrap();
        assert!(das >= base - 0.02, "{das} vs {base}");
    }
}

#[test]
fn untrained_das_is_the_random_rotation() {
    let f = planted();
    let cfg = FeaturizeConfig {
        steps: 0,
        seed: 3,
        ..FeaturizeConfig::default()
    };
    let a = train_das(&f.gt.model, f.site, &f.train, 1, &cfg).unwrap();
    let d = f.gt.model.config().d_model;
    assert_eq!(a.featurizer.rotation, Featurizer::random_orthogonal(d, 3).rotation);
    let frozen = faithfulness_score(&f.gt.model, &a, &f.test).unwrap();
    let random = with_featurizer(
        &f.gt.model,
        Featurizer::random_orthogonal(d, 3),
        FeatureIndices::leading(1),
        f.site,
    );
    assert_eq!(frozen, faithfulness_score(&f.gt.model, &random, &f.test).unwrap());
    // and both sit at the Monte Carlo level of a random direction
    assert!((frozen - 0.5).abs() < 0.1, "{frozen}");
}

#[test]
fn dbm_selects_the_planted_axis() {
    let f = planted_fixture(GroundTruthKind::PlantedAxis);
    let u = &f.gt.direction.as_ref().unwrap().vector;
    let axis = (0..u.len()).find(|&i| u[i].abs() > 0.5).unwrap();
    let cfg = FeaturizeConfig {
        lr: 0.05,
        ..FeaturizeConfig::default()
    };
    let a = train_dbm(&f.gt.model, f.site, &f.train, 0.05, &cfg).unwrap();
    assert_eq!(a.features.as_slice(), &[axis]);
    assert!(a.featurizer.rotation.is_none());
    assert!(a.featurizer.gates().unwrap().iter().all(|&g| g > 0.0 && g < 1.0));
    assert_eq!(faithfulness_score(&f.gt.model, &a, &f.test).unwrap(), 1.0);
}

#[test]
fn dbm_with_overwhelming_sparsity_selects_nothing() {
    let f = planted_fixture(GroundTruthKind::PlantedAxis);
    let cfg = FeaturizeConfig {
        lr: 0.05,
        steps: 200,
        ..FeaturizeConfig::default()
    };
    let a = train_dbm(&f.gt.model, f.site, &f.train, 1e6, &cfg).unwrap();
    assert!(a.features.is_empty());
    let d = f.gt.model.config().d_model;
    let noop = with_featurizer(&f.gt.model, Featurizer::identity(d), FeatureIndices::empty(), f.site);
    assert_eq!(
        faithfulness_score(&f.gt.model, &a, &f.test).unwrap(),
        faithfulness_score(&f.gt.model, &noop, &f.test).unwrap()
    );
}

#[test]
fn pca_of_isotropic_gaussians_has_flat_spectrum() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let acts: Vec<Vec<f64>> = (0..20_000)
        .map(|_| (0..4).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let b = pca_basis(&acts).unwrap();
    assert_eq!(b.rank, 4);
    // sampling error of a unit variance over 20k draws is about 1%
    for v in &b.explained_variance {
        assert!((v - 1.0).abs() < 0.05, "{:?}", b.explained_variance);
    }
    let errs: Vec<f64> = (0..=4).map(|k| reconstruction_error(&acts, &b, k)).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{errs:?}");
    assert!(errs[4] < 1e-20);
}

#[test]
fn pca_on_the_planted_site() {
    let f = planted();
    let d = f.gt.model.config().d_model;
    let (a, basis) = fit_pca(&f.gt.model, f.site, &f.data.train, "side", d).unwrap();
    // the site has far fewer directions of variation than its width
    assert!(basis.rank < d);
    assert_eq!(a.features.len(), basis.rank);
    assert!(a.provenance.notes[0].contains("rank"));
    let probes: Vec<Vec<f64>> = f.data.train[..20]
        .iter()
        .map(|i| capture(&f.gt.model, &i.tokens, &f.site).unwrap().0)
        .collect();
    assert!(a.featurizer.round_trip_error(&probes).unwrap() < 1e-10);
    let acts: Vec<Vec<f64>> = f.data.train
        .iter()
        .map(|i| capture(&f.gt.model, &i.tokens, &f.site).unwrap().0)
        .collect();
    let errs: Vec<f64> = (0..=d).map(|k| reconstruction_error(&acts, &basis, k)).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn pca_rejects_dims_beyond_the_width() {
    let f = planted();
    let d = f.gt.model.config().d_model;
    assert!(fit_pca(&f.gt.model, f.site, &f.data.train, "side", d + 1).is_err());
}

#[test]
fn nonlinear_beats_das_on_xor() {
    let f = xor();
    let cfg = FeaturizeConfig::default();
    let das = train_das(&f.gt.model, f.site, &f.train, 1, &cfg).unwrap();
    let nl = train_nonlinear(&f.gt.model, f.site, &f.train, 1, 16, &cfg).unwrap();
    let s_das = faithfulness_score(&f.gt.model, &das, &f.test).unwrap();
    let s_nl = faithfulness_score(&f.gt.model, &nl, &f.test).unwrap();
    assert!(s_nl >= 0.9, "nonlinear {s_nl}");
    assert!(s_das <= 0.7, "das {s_das}");
    let probes: Vec<Vec<f64>> = f.train.pairs[..50]
        .iter()
        .map(|p| capture(&f.gt.model, &p.base, &f.site).unwrap().0)
        .collect();
    assert!(nl.featurizer.round_trip_error(&probes).unwrap() < 1e-4);

    let exported = nl.linear_export();
    assert!(exported.featurizer.coupling.is_none());
    assert_eq!(exported.featurizer.rotation, nl.featurizer.rotation);
    assert!(!serde_json::to_string(&exported).unwrap().contains("w_u"));
}

#[test]
fn untrained_nonlinear_behaves_as_untrained_das() {
    let f = xor();
    let cfg = FeaturizeConfig {
        steps: 0,
        seed: 4,
        ..FeaturizeConfig::default()
    };
    let das = train_das(&f.gt.model, f.site, &f.train, 1, &cfg).unwrap();
    let nl = train_nonlinear(&f.gt.model, f.site, &f.train, 1, 8, &cfg).unwrap();
    for p in &f.test.pairs[..40] {
        let a = interchange_logits(&f.gt.model, &p.base, &p.source, &das).unwrap();
        let b = interchange_logits(&f.gt.model, &p.base, &p.source, &nl).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn tanh_orthogonal_matches_das_and_exports_a_rotation() {
    let f = planted();
    let t = train_tanh_orthogonal(&f.gt.model, f.site, &f.train, 1, &FeaturizeConfig::default()).unwrap();
    let s_t = faithfulness_score(&f.gt.model, &t, &f.test).unwrap();
    let s_d = faithfulness_score(&f.gt.model, planted_das(), &f.test).unwrap();
    assert!((s_t - s_d).abs() <= 0.02, "{s_t} vs {s_d}");
    assert_eq!(t.featurizer.kind, FeaturizerKind::TanhOrthogonal);
    assert!(t.featurizer.coupling.is_none());
    // exported map is linear: features are h Q
    let h: Vec<f64> = (0..t.featurizer.width).map(|i| i as f64 * 0.1 - 1.0).collect();
    let x = t.featurizer.features(&h).unwrap();
    let g = t.featurizer.direction(3).unwrap();
    let expect: f64 = h.iter().zip(&g).map(|(a, b)| a * b).sum();
    assert!((x[3] - expect).abs() < 1e-12);
}

#[test]
fn training_objectives_pass_finite_differences() {
    let f = xor();
    let pairs = PairSet {
        variable: "a".into(),
        pairs: f.train.pairs[..4].to_vec(),
    };
    let d = f.gt.model.config().d_model;
    for (kind, dims, hidden) in [
        (FeaturizerKind::TanhOrthogonal, 1, 0),
        (FeaturizerKind::NonlinearMlp, 1, 3),
        (FeaturizerKind::Mask, 0, 0),
    ] {
        let t = TrainableFeaturizer::new(kind, d, dims, hidden, 0.3).unwrap();
        let mut p = t.init(2);
        if kind == FeaturizerKind::NonlinearMlp {
            // move W_d off zero so the coupling contributes
            let n = p.numel();
            for v in &mut p.data_mut()[n - 3..] {
                *v = 0.4;
            }
        }
        let obj = t.objective(&f.gt.model, &f.site, &pairs).unwrap();
        let report = finite_difference_check(obj, &p, 1e-5).unwrap();
        assert!(report.passed, "{kind}: {}", report.max_rel_deviation);
    }
}

#[test]
fn trainers_validate_their_arguments() {
    let f = xor();
    let d = f.gt.model.config().d_model;
    let cfg = FeaturizeConfig::default();
    assert!(train_das(&f.gt.model, f.site, &f.train, d + 1, &cfg).is_err());
    assert!(train_nonlinear(&f.gt.model, f.site, &f.train, 2, 1, &cfg).is_err());
    assert!(train_nonlinear(&f.gt.model, f.site, &f.train, d / 2, 16, &cfg).is_err());
    assert!(train_dbm(&f.gt.model, f.site, &f.train, -1.0, &cfg).is_err());
    assert!(TrainableFeaturizer::new(FeaturizerKind::Pca, d, 1, 0, 0.0).is_err());
    let empty = PairSet {
        variable: "a".into(),
        pairs: vec![],
    };
    assert!(train_das(&f.gt.model, f.site, &empty, 1, &cfg).is_err());
}

#[test]
fn artifacts_round_trip() {
    let f = planted();
    let mut a = planted_das().clone();
    let recorded = a.record_faithfulness(&f.gt.model, &f.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_artifact(&a, dir.path()).unwrap();
    assert!(!dir.path().join("position_rule.json").exists());
    let b = load_artifact(dir.path(), &f.gt.model).unwrap();
    assert_eq!(b.featurizer.rotation, a.featurizer.rotation);
    assert_eq!(b, a);
    let again = faithfulness_score(&f.gt.model, &b, &f.test).unwrap();
    assert!((again - recorded).abs() <= 1e-6);
    assert_eq!(b.faithfulness.as_ref().unwrap().value, recorded);

    let other = build_ground_truth_model(GroundTruthKind::PlantedDirection, 1).model;
    assert!(matches!(load_artifact(dir.path(), &other), Err(Error::Incompatible(_))));
    assert!(matches!(faithfulness_score(&other, &b, &f.test), Err(Error::Incompatible(_))));

    let meta = dir.path().join("meta.json");
    let text = std::fs::read_to_string(&meta).unwrap().replace("\"version\": 1", "\"version\": 99");
    std::fs::write(&meta, text).unwrap();
    let err = load_artifact(dir.path(), &f.gt.model).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
}

#[test]
fn dynamic_positions_are_serialized_as_rules() {
    let f = xor();
    let cfg = FeaturizeConfig {
        steps: 5,
        ..FeaturizeConfig::default()
    };
    let a = train_nonlinear(&f.gt.model, f.site, &f.train, 1, 4, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_artifact(&a, dir.path()).unwrap();
    let rule = std::fs::read_to_string(dir.path().join("position_rule.json")).unwrap();
    assert!(rule.contains("\"last\""), "{rule}");
    let b = load_artifact(dir.path(), &f.gt.model).unwrap();
    assert_eq!(b.site.position, PositionSelector::Last);
    assert_eq!(b.featurizer.coupling, a.featurizer.coupling);
}

#[test]
fn guardrail_holds_on_shuffled_labels() {
    let f = xor();
    let cfg = FeaturizeConfig::default();
    let g = control_guardrail(&f.gt.model, f.site, &f.train, &f.test, 1, 16, &cfg, GUARDRAIL_MARGIN).unwrap();
    assert!(g.passed, "{g:?}");
    assert!(g.control_faithfulness <= g.random_baseline + 0.05);
    g.enforce().unwrap();
    let strict = GuardrailReport {
        margin: -1.0,
        passed: false,
        ..g
    };
    assert!(matches!(strict.enforce(), Err(Error::Guardrail(_))));
}

#[test]
fn shuffled_labels_keep_the_label_counts() {
    let f = xor();
    let s = f.train.shuffled_labels(1);
    let mut a: Vec<usize> = f.train.pairs.iter().map(|p| p.expected).collect();
    let mut b: Vec<usize> = s.pairs.iter().map(|p| p.expected).collect();
    assert_ne!(a, b);
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}

#[test]
fn sites_are_validated() {
    let model = random_model();
    let d = model.config().d_model;
    let bad = [
        InterventionSite::residual(3, PositionSelector::Last),
        InterventionSite::head(2, 0, PositionSelector::Last),
        InterventionSite::head(0, 2, PositionSelector::Last),
    ];
    for site in bad {
        assert!(site.validate(&model).is_err(), "{site}");
        assert!(AlignmentArtifact::new(&model, Featurizer::identity(d), FeatureIndices::empty(), site, "x", TrainingProvenance::default()).is_err());
    }
    assert_eq!(PositionSelector::FromEnd { offset: 2 }.resolve(5).unwrap(), 2);
    assert!(PositionSelector::FromEnd { offset: 5 }.resolve(5).is_err());
    assert!(PositionSelector::Fixed { index: 5 }.resolve(5).is_err());
    let site = InterventionSite::residual(0, PositionSelector::Fixed { index: 9 });
    assert!(capture(&model, &[1, 2, 3], &site).is_err());
}

#[test]
fn feature_indices_are_checked() {
    assert!(FeatureIndices::new(vec![1, 1], 4).is_err());
    assert!(FeatureIndices::new(vec![4], 4).is_err());
    assert_eq!(FeatureIndices::new(vec![3, 0], 4).unwrap().as_slice(), &[0, 3]);
    assert_eq!("dbm".parse::<FeaturizerKind>().unwrap(), FeaturizerKind::Mask);
    assert!("sae".parse::<FeaturizerKind>().is_err());
}
