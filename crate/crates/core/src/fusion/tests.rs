use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::metrics::{oracle_wer, rank1_selections, OracleMode};
use crate::nbest::fixtures::dickie_jones;
use crate::nbest::Hypothesis;

fn word_count_scorer() -> Box<dyn Scorer> {
    Box::new(FnScorer::new("words", |t: &str| Ok(t.split_whitespace().count() as f64)))
}

/// Random lists over a small vocabulary with the reference at a random rank.
fn random_lists(seed: u64, n: usize) -> Vec<NBestList> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = ["play", "red", "smoke", "by", "the", "reytons", "jones", "movies"];
    (0..n)
        .map(|u| {
            let len = rng.random_range(2..5);
            let reference: Vec<&str> = (0..len).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
            let nh = rng.random_range(1..5);
            let ref_pos = rng.random_range(0..nh);
            let hyps = (0..nh)
                .map(|i| {
                    let text = if i == ref_pos {
                        reference.join(" ")
                    } else {
                        let mut w = reference.clone();
                        let k = rng.random_range(0..w.len());
                        w[k] = vocab[rng.random_range(0..vocab.len())];
                        w.join(" ")
                    };
                    let ac = 10.0 + i as f64 + rng.random::<f64>();
                    Hypothesis::new(text, ac, rng.random_range(1.0..5.0)).unwrap()
                })
                .collect();
            NBestList::new(format!("u{u}"), reference.join(" "), hyps)
        })
        .collect()
}

#[test]
fn empty_registry_gives_ondevice_columns() {
    let list = dickie_jones();
    let f = extract_features(std::slice::from_ref(&list), &ScorerRegistry::new()).unwrap();
    assert_eq!(f[0], FeatureMatrix::ondevice(&list));
}

#[test]
fn word_count_column() {
    let mut reg = ScorerRegistry::new();
    reg.register(word_count_scorer()).unwrap();
    assert!(matches!(reg.register(word_count_scorer()), Err(FusionError::DuplicateScorer(_))));
    let f = extract_features(&[dickie_jones()], &reg).unwrap();
    assert_eq!(f[0].columns, vec!["acoustic", "ondevice_lm", "words"]);
    let col: Vec<f64> = f[0].values.iter().map(|r| r[2]).collect();
    assert_eq!(col, vec![5.0, 4.0, 4.0]);
}

#[test]
fn cache_serves_identical_values_without_rescoring() {
    let dir = tempfile::tempdir().unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let make = |calls: Arc<AtomicUsize>| {
        let mut reg = ScorerRegistry::with_cache(dir.path());
        reg.register(Box::new(FnScorer::new("noisy", move |t: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(t.len() as f64 / 7.0 + 0.1)
        })))
        .unwrap();
        reg
    };
    let data = random_lists(3, 20);
    let first = extract_features(&data, &make(calls.clone())).unwrap();
    let scored = calls.load(Ordering::SeqCst);
    assert!(scored > 0);
    let second = extract_features(&data, &make(calls.clone())).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), scored);
    for (a, b) in first.iter().zip(&second) {
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn scorer_failures_name_scorer_and_utterance() {
    let mut reg = ScorerRegistry::new();
    reg.register(Box::new(FnScorer::new("picky", |t: &str| {
        if t.contains("key") {
            Err("refused".to_string())
        } else {
            Ok(1.0)
        }
    })))
    .unwrap();
    match extract_features(&[dickie_jones()], &reg) {
        Err(FusionError::Scorer { scorer, utterance, message }) => {
            assert_eq!(scorer, "picky");
            assert_eq!(utterance, dickie_jones().utterance_id);
            assert_eq!(message, "refused");
        }
        other => panic!("{other:?}"),
    }
    let mut reg = ScorerRegistry::new();
    reg.register(Box::new(FnScorer::new("nan", |_: &str| Ok(f64::NAN)))).unwrap();
    assert!(matches!(extract_features(&[dickie_jones()], &reg), Err(FusionError::Scorer { .. })));
}

fn weights(names: &[&str], w: &[f64]) -> FusionWeights {
    FusionWeights {
        names: names.iter().map(|s| s.to_string()).collect(),
        weights: w.to_vec(),
    }
}

#[test]
fn combined_costs_on_dickie_jones() {
    let list = dickie_jones();
    let fm = FeatureMatrix::ondevice(&list);
    let ac = weights(&["acoustic", "ondevice_lm"], &[1.0, 0.0]);
    let costs: Vec<f64> = fm.values.iter().map(|r| combined_cost(r, &ac).unwrap()).collect();
    assert_eq!(costs, vec![208.0, 286.0, 638.0]);
    let lm = weights(&["acoustic", "ondevice_lm"], &[0.0, 1.0]);
    let costs: Vec<f64> = fm.values.iter().map(|r| combined_cost(r, &lm).unwrap()).collect();
    assert_eq!(costs, vec![50.0, 48.0, 20.0]);
    assert!(combined_cost(&[1.0], &lm).is_err());

    let sel = rescore(std::slice::from_ref(&list), std::slice::from_ref(&fm), &lm).unwrap();
    assert_eq!(sel[&list.utterance_id], Some(2));
    let sel = rescore(std::slice::from_ref(&list), std::slice::from_ref(&fm), &ac).unwrap();
    assert_eq!(sel[&list.utterance_id], Some(0));
    let zero = weights(&["acoustic", "ondevice_lm"], &[0.0, 0.0]);
    let sel = rescore(std::slice::from_ref(&list), std::slice::from_ref(&fm), &zero).unwrap();
    assert_eq!(sel[&list.utterance_id], Some(0));
    let bad = weights(&["acoustic", "lm"], &[1.0, 1.0]);
    assert!(rescore(std::slice::from_ref(&list), &[fm], &bad).is_err());
}

#[test]
fn single_and_empty_lists() {
    let one = NBestList::new("a", "x y", vec![Hypothesis::new("x z", 3.0, 1.0).unwrap()]);
    let none = NBestList::new("b", "x y", vec![]);
    let data = vec![one, none];
    let feats: Vec<FeatureMatrix> = data.iter().map(FeatureMatrix::ondevice).collect();
    let w = weights(&["acoustic", "ondevice_lm"], &[1.0, -7.0]);
    let sel = rescore(&data, &feats, &w).unwrap();
    assert_eq!(sel["a"], Some(0));
    assert_eq!(sel["b"], None);
}

proptest! {
    #[test]
    fn selections_invariant_to_scaling_and_shifts(seed in 0u64..500, c in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let data = random_lists(seed, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let feats: Vec<FeatureMatrix> = data.iter().map(|l| {
            let mut fm = FeatureMatrix::ondevice(l);
            let col: Vec<f64> = (0..l.len()).map(|_| rng.random_range(0.0..20.0)).collect();
            fm.push_column("x", &col).unwrap();
            fm
        }).collect();
        let w = weights(&["acoustic", "ondevice_lm", "x"], &[1.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
        let base = rescore(&data, &feats, &w).unwrap();
        let scaled = weights(&["acoustic", "ondevice_lm", "x"], &w.weights.iter().map(|v| v * c).collect::<Vec<_>>());
        prop_assert_eq!(&base, &rescore(&data, &feats, &scaled).unwrap());
        // Adding a constant to one feature column of an utterance shifts all
        // of its costs by the same amount.
        let shifted: Vec<FeatureMatrix> = feats.iter().map(|fm| {
            let mut fm = fm.clone();
            for row in fm.values.iter_mut() { row[0] += shift; }
            fm
        }).collect();
        prop_assert_eq!(&base, &rescore(&data, &shifted, &w).unwrap());
    }
}

fn tight() -> PowellOptions {
    PowellOptions {
        tolerance: 1e-16,
        max_iterations: 500,
        min_step: 1e-11,
        ..PowellOptions::default()
    }
}

#[test]
fn powell_on_separable_quadratic() {
    let r = powell_minimize(|x| (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2), &[0.0, 0.0], &tight()).unwrap();
    assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] + 2.0).abs() < 1e-6, "{:?}", r.x);
    assert!(r.value <= r.trajectory[0].1);
}

#[test]
fn powell_on_rosenbrock() {
    let rosen = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
    let r = powell_minimize(rosen, &[-1.2, 1.0], &tight()).unwrap();
    assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r);
}

#[test]
fn powell_on_random_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
            }
        }
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a - b).collect();
            (0..n).map(|i| (0..n).map(|j| d[i] * a[i][j] * d[j]).sum::<f64>()).sum::<f64>()
        };
        let r = powell_minimize(f, &vec![0.0; n], &tight()).unwrap();
        for (x, mm) in r.x.iter().zip(&m) {
            assert!((x - mm).abs() < 1e-6, "n={n}: {:?} vs {m:?}", r.x);
        }
    }
}

#[test]
fn powell_rejects_non_finite_objective() {
    let r = powell_minimize(|x| if x[0] > 0.5 { f64::NAN } else { -x[0] }, &[0.0], &PowellOptions::default());
    assert!(matches!(r, Err(FusionError::NonFinite(_))));
}

fn oracle_features(data: &[NBestList]) -> Vec<FeatureMatrix> {
    data.iter()
        .map(|l| {
            let mut fm = FeatureMatrix::ondevice(l);
            let col: Vec<f64> = l
                .hypotheses
                .iter()
                .map(|h| if h.text() == l.reference { 0.0 } else { 1.0 })
                .collect();
            fm.push_column("oracle", &col).unwrap();
            fm
        })
        .collect()
}

#[test]
fn oracle_feature_reaches_oracle_wer() {
    let data = random_lists(5, 80);
    let feats = oracle_features(&data);
    let td = TuningData::new(&data, &feats).unwrap();
    let r = tune_weights(&td, &TuneOptions::default(), None).unwrap();
    let best = oracle_wer(&data, OracleMode::Best).unwrap();
    assert!(r.baseline_objective > best);
    assert_eq!(r.objective, best);
    let sel = rescore(&data, &feats, &r.weights).unwrap();
    let report_wer = td.wer(&r.weights.weights);
    assert_eq!(report_wer, best);
    assert_eq!(sel.len(), data.len());
    assert_eq!(r.weights.get("acoustic"), Some(1.0));
}

#[test]
fn tuning_never_regresses_and_is_deterministic() {
    for seed in 0..5 {
        let data = random_lists(seed, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<FeatureMatrix> = oracle_features(&data)
            .into_iter()
            .map(|mut fm| {
                for row in fm.values.iter_mut() {
                    row[2] += rng.random_range(0.0..1.5);
                }
                fm
            })
            .collect();
        let td = TuningData::new(&data, &feats).unwrap();
        let a = tune_weights(&td, &TuneOptions::default(), None).unwrap();
        assert!(a.objective <= a.baseline_objective);
        assert_eq!(a.trajectory[0].objective, a.baseline_objective);
        let b = tune_weights(&td, &TuneOptions::default(), None).unwrap();
        assert_eq!(a, b);
        // Duplicating every utterance leaves the objective surface unchanged.
        let doubled: Vec<NBestList> = data
            .iter()
            .chain(data.iter())
            .enumerate()
            .map(|(i, l)| NBestList::new(format!("d{i}"), l.reference.clone(), l.hypotheses.clone()))
            .collect();
        let dfeats: Vec<FeatureMatrix> = feats
            .iter()
            .chain(feats.iter())
            .zip(&doubled)
            .map(|(fm, l)| FeatureMatrix {
                utterance_id: l.utterance_id.clone(),
                ..fm.clone()
            })
            .collect();
        let c = tune_weights(&TuningData::new(&doubled, &dfeats).unwrap(), &TuneOptions::default(), None).unwrap();
        assert_eq!(a.weights, c.weights);
    }
}

#[test]
fn rank1_correct_everywhere_tunes_to_zero() {
    let data: Vec<NBestList> = random_lists(9, 30)
        .into_iter()
        .map(|mut l| {
            let r = l.reference.clone();
            let pos = l.hypotheses.iter().position(|h| h.text() == r).unwrap();
            l.hypotheses.swap(0, pos);
            l
        })
        .collect();
    let feats: Vec<FeatureMatrix> = data.iter().map(FeatureMatrix::ondevice).collect();
    let td = TuningData::new(&data, &feats).unwrap();
    let r = tune_weights(&td, &TuneOptions::default(), None).unwrap();
    // Rank order uses acoustic + lm; rank 1 is not necessarily cheapest, so
    // only the bound is guaranteed.
    assert!(r.objective <= r.baseline_objective);
    let sel = rank1_selections(&data);
    assert!(sel.values().all(|s| *s == Some(0)));
}

#[test]
fn warm_start_is_used_only_when_not_worse() {
    let data = random_lists(21, 50);
    let feats = oracle_features(&data);
    let td = TuningData::new(&data, &feats).unwrap();
    let bad = weights(&["acoustic", "ondevice_lm", "oracle"], &[1.0, 1.0, -50.0]);
    let r = tune_weights(&td, &TuneOptions::default(), Some(&bad)).unwrap();
    assert_eq!(r.trajectory[0].objective, r.baseline_objective);
    let good = weights(&["acoustic", "ondevice_lm", "oracle"], &[1.0, 1.0, 40.0]);
    let r = tune_weights(&td, &TuneOptions::default(), Some(&good)).unwrap();
    assert!(r.trajectory[0].objective < r.baseline_objective);
}

#[test]
fn weights_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(&["acoustic", "ondevice_lm", "ngram"], &[1.0, 0.37, 0.1234567890123]);
    let file = WeightsFile::new(
        &w,
        WeightsProvenance {
            dataset_hash: dataset_hash(&[dickie_jones()]),
            scorer_ids: vec!["ngram".into()],
            options: serde_json::to_value(TuneOptions::default()).unwrap(),
        },
    );
    let p = dir.path().join("w.json");
    file.save(&p).unwrap();
    let back = WeightsFile::load(&p).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.fusion_weights(), w);
}
