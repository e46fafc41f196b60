use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::metrics::{oracle_wer, selected_counts, rank1_selections, EditCounts, OracleMode};

fn grammar(templates: &[(&str, f64)], entities: &[(&str, f64)]) -> QueryGrammar {
    QueryGrammar::new(
        templates.iter().map(|(s, w)| (s.to_string(), *w)).collect(),
        entities.iter().map(|(s, w)| (s.to_string(), *w)).collect(),
    )
    .unwrap()
}

fn zipf_grammar(nt: usize, ne: usize) -> QueryGrammar {
    let templates = (0..nt).map(|i| (format!("play {SLOT} t{i}"), 1.0)).collect();
    let entities = (0..ne).map(|i| (format!("e{i}"), 1.0 / (i + 1) as f64)).collect();
    QueryGrammar::new(templates, entities).unwrap()
}

#[test]
fn parse_round_trips_and_reports_lines() {
    let text = "# comment\n[templates]\nplay {entity}\t2\n{entity} now\t1\n\n[entities]\nred smoke\t3\nthe reytons\t1\n";
    let g = QueryGrammar::parse(text).unwrap();
    assert_eq!(g.templates().len(), 2);
    assert_eq!(g.template_probs(), vec![2.0 / 3.0, 1.0 / 3.0]);
    assert_eq!(g.query(0, 0), "play red smoke");
    assert_eq!(QueryGrammar::parse(&g.to_tsv()).unwrap(), g);

    let two_slots = "[templates]\nplay {entity} {entity}\t1\n[entities]\na\t1\n";
    match QueryGrammar::parse(two_slots) {
        Err(DatagenError::Grammar { line: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
    match QueryGrammar::parse("[templates]\nplay {entity}\t1\n[entities]\na\tzero\n") {
        Err(DatagenError::Grammar { line: 4, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        QueryGrammar::parse("[templates]\nplay {entity}\t1\n"),
        Err(DatagenError::EmptyGrammar("entities"))
    ));
}

#[test]
fn bundled_grammar_shape() {
    let g = QueryGrammar::bundled();
    assert_eq!(g.templates().len(), 100);
    assert_eq!(g.entities().len(), 2000);
    let distinct: BTreeSet<&str> = g.entities().iter().map(|(e, _)| e.as_str()).collect();
    assert_eq!(distinct.len(), 2000);
    // Zipf: weight of rank r is 1/r.
    for (r, (_, w)) in g.entities().iter().enumerate() {
        assert!((w * (r + 1) as f64 - 1.0).abs() < 1e-8);
    }
}

#[test]
fn cutoff_one_one_is_a_single_certain_query() {
    let g = apply_cutoffs(&zipf_grammar(5, 20), 1, 1);
    assert_eq!(g.templates().len(), 1);
    assert_eq!(g.entities().len(), 1);
    assert_eq!(g.templates()[0].1, 1.0);
    assert_eq!(g.entities()[0].1, 1.0);
    assert_eq!(g.query(0, 0), "play e0 t0");
}

#[test]
fn cutoffs_keep_top_priors_with_string_ties_and_renormalize() {
    let g = grammar(
        &[("b {entity}", 1.0), ("a {entity}", 1.0), ("c {entity}", 3.0)],
        &[("x", 1.0), ("y", 2.0)],
    );
    let cut = apply_cutoffs(&g, 2, 10);
    let kept: Vec<&str> = cut.templates().iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(kept, ["c {entity}", "a {entity}"]);
    assert_eq!(cut.entities().len(), 2);

    let big = QueryGrammar::bundled();
    let cut = apply_cutoffs(&big, 37, 1234);
    for probs in [cut.template_probs(), cut.entity_probs()] {
        assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let stored: f64 = cut.entities().iter().map(|(_, w)| w).sum();
    assert!((stored - 1.0).abs() <= 1e-12);
}

#[test]
fn single_pair_grammar_samples_exactly_that_query() {
    let g = grammar(&[("play {entity}", 1.0)], &[("red smoke", 1.0)]);
    for sampler in [Sampler::Sequential { cap: 10 }, Sampler::Poissonized] {
        let q = sample_queries(&g, 3, sampler).unwrap();
        assert_eq!(q.len(), 1);
        assert!(q["play red smoke"] >= 1);
    }
}

#[test]
fn uniform_two_by_two_covers_all_queries() {
    let g = grammar(&[("a {entity}", 1.0), ("b {entity}", 1.0)], &[("x", 1.0), ("y", 1.0)]);
    for seed in 0..20 {
        for sampler in [Sampler::Sequential { cap: 10_000 }, Sampler::Poissonized] {
            let q = sample_queries(&g, seed, sampler).unwrap();
            let keys: Vec<&str> = q.keys().map(|s| s.as_str()).collect();
            assert_eq!(keys, ["a x", "a y", "b x", "b y"]);
        }
    }
}

#[test]
fn sequential_sampler_enforces_cap() {
    let g = zipf_grammar(5, 20);
    match sample_queries(&g, 0, Sampler::Sequential { cap: 50 }) {
        Err(DatagenError::SamplingCap { cap: 50, missing }) => assert!(missing > 0),
        other => panic!("{other:?}"),
    }
}

/// Per-pair frequencies against `N · p` with the multinomial standard
/// deviation.
fn assert_within_3_sigma(g: &QueryGrammar, q: &QueryCounts) {
    let n = total_occurrences(q) as f64;
    let tp = g.template_probs();
    let ep = g.entity_probs();
    for (t, pt) in tp.iter().enumerate() {
        for (e, pe) in ep.iter().enumerate() {
            let p = pt * pe;
            let c = q[&g.query(t, e)] as f64;
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!(
                (c - n * p).abs() <= 3.0 * sigma + 1.0,
                "pair ({t},{e}): count {c}, expected {} ± {sigma}",
                n * p
            );
        }
    }
}

#[test]
fn zipf_five_by_twenty_matches_joint_priors() {
    let g = zipf_grammar(5, 20);
    assert_within_3_sigma(&g, &sample_queries(&g, 11, Sampler::Sequential { cap: 1_000_000 }).unwrap());
    assert_within_3_sigma(&g, &sample_queries(&g, 11, Sampler::Poissonized).unwrap());
}

#[test]
fn both_samplers_match_the_coupon_collector_expectation() {
    // Two coupons with probabilities p and 1-p: E[T] = 1/p + 1/(1-p) - 1.
    let g = grammar(&[("{entity}", 1.0)], &[("a", 1.0), ("b", 4.0)]);
    let expected = 1.0 / 0.2 + 1.0 / 0.8 - 1.0;
    let runs = 4000;
    for sampler in [Sampler::Sequential { cap: 100_000 }, Sampler::Poissonized] {
        let totals: Vec<f64> = (0..runs)
            .map(|s| total_occurrences(&sample_queries(&g, s, sampler).unwrap()) as f64)
            .collect();
        let mean = totals.iter().sum::<f64>() / runs as f64;
        let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        let se = (var / runs as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{sampler:?}: mean {mean} vs {expected} (se {se})");
    }
}

#[test]
fn split_sizes_within_binomial_bounds() {
    let queries: QueryCounts = (0..100).map(|i| (format!("q{i}"), 100)).collect();
    let (train, val, test) = split_corpus(&queries, [0.9, 0.05, 0.05], 5).unwrap();
    let n = 10_000.0;
    for (part, p) in [(&train, 0.9f64), (&val, 0.05), (&test, 0.05)] {
        let size = total_occurrences(part) as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((size - n * p).abs() <= 4.0 * sigma, "size {size} vs {}", n * p);
    }
}

#[test]
fn split_with_everything_in_train() {
    let queries: QueryCounts = [("a".to_string(), 7), ("b".to_string(), 1)].into();
    let (train, val, test) = split_corpus(&queries, [1.0, 0.0, 0.0], 1).unwrap();
    assert_eq!(train, queries);
    assert!(val.is_empty() && test.is_empty());
    assert!(matches!(split_corpus(&queries, [0.5, 0.2, 0.2], 1), Err(DatagenError::BadRatios(_))));
}

#[test]
fn ten_distinct_frequencies_partition_one_four_five() {
    let split: QueryCounts = (0..10).map(|i| (format!("q{i}"), 100 - i as u64)).collect();
    let s = stratify(&split, 1, 0).unwrap();
    let names = |p: Population| s.partitions[&p].clone();
    assert_eq!(names(Population::Head), ["q0"]);
    assert_eq!(names(Population::Torso), ["q1", "q2", "q3", "q4"]);
    assert_eq!(names(Population::Tail), ["q5", "q6", "q7", "q8", "q9"]);
}

#[test]
fn equal_frequencies_split_by_string_order() {
    let split: QueryCounts = (0..20).map(|i| (format!("q{i:02}"), 3)).collect();
    let s = stratify(&split, 2, 0).unwrap();
    assert_eq!(s.partitions[&Population::Head], ["q00", "q01"]);
    assert_eq!(s.partitions[&Population::Torso].len(), 8);
    assert_eq!(s.partitions[&Population::Tail].len(), 10);
    assert_eq!(s.partitions[&Population::Tail][0], "q10");
}

#[test]
fn stratify_reports_small_partition() {
    let split: QueryCounts = (0..10).map(|i| (format!("q{i}"), i as u64 + 1)).collect();
    match stratify(&split, 2, 0) {
        Err(DatagenError::PartitionTooSmall {
            population: Population::Head,
            available: 1,
            requested: 2,
        }) => {}
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn stratify_is_a_ranked_disjoint_cover(counts in proptest::collection::vec(1u64..50, 10..300), seed in 0u64..1000) {
        let split: QueryCounts = counts.iter().enumerate().map(|(i, &c)| (format!("q{i}"), c)).collect();
        let n = split.len();
        let s = stratify(&split, 1, seed).unwrap();
        let head = &s.partitions[&Population::Head];
        let torso = &s.partitions[&Population::Torso];
        let tail = &s.partitions[&Population::Tail];
        prop_assert_eq!(head.len(), n * 10 / 100);
        prop_assert_eq!(head.len() + torso.len(), n * 50 / 100);
        let all: BTreeSet<&String> = head.iter().chain(torso).chain(tail).collect();
        prop_assert_eq!(all.len(), n);
        let min_of = |v: &Vec<String>| v.iter().map(|q| split[q]).min().unwrap();
        let max_of = |v: &Vec<String>| v.iter().map(|q| split[q]).max().unwrap();
        prop_assert!(min_of(head) >= max_of(torso));
        prop_assert!(min_of(torso) >= max_of(tail));
        for pop in Population::ALL {
            let sample = &s.samples[&pop];
            prop_assert_eq!(sample.len(), 1);
            prop_assert!(s.partitions[&pop].contains(&sample[0]));
        }
    }

    #[test]
    fn split_conserves_occurrences(counts in proptest::collection::vec(1u64..1000, 1..50), seed in 0u64..1000) {
        let queries: QueryCounts = counts.iter().enumerate().map(|(i, &c)| (format!("q{i}"), c)).collect();
        let (a, b, c) = split_corpus(&queries, [0.9, 0.05, 0.05], seed).unwrap();
        for (q, &n) in &queries {
            let got = [&a, &b, &c].iter().map(|m| m.get(q).copied().unwrap_or(0)).sum::<u64>();
            prop_assert_eq!(got, n);
        }
    }

    #[test]
    fn sequential_sampling_terminates_under_cap(
        tw in proptest::collection::vec(0.1f64..10.0, 1..5),
        ew in proptest::collection::vec(0.1f64..10.0, 1..8),
        seed in 0u64..10_000,
    ) {
        let g = QueryGrammar::new(
            tw.iter().enumerate().map(|(i, &w)| (format!("t{i} {SLOT}"), w)).collect(),
            ew.iter().enumerate().map(|(i, &w)| (format!("e{i}"), w)).collect(),
        ).unwrap();
        let q = sample_queries(&g, seed, Sampler::Sequential { cap: 1_000_000 }).unwrap();
        prop_assert_eq!(q.len(), tw.len() * ew.len());
    }

    #[test]
    fn simulated_reference_is_exact_when_present(seed in 0u64..500, retention in 0.0f64..1.0) {
        let g = zipf_grammar(3, 30);
        let queries: Vec<String> = (0..20).map(|i| g.query(i % 3, i)).collect();
        let noise = NoiseConfig { retention, ..NoiseConfig::default() };
        for (q, list) in queries.iter().zip(simulate_nbest(&queries, &g, &noise, seed, "u").unwrap()) {
            prop_assert_eq!(&list.reference, q);
            let hits = list.hypotheses.iter().filter(|h| h.text() == q.as_str()).count();
            prop_assert!(hits <= 1);
            let costs: Vec<f64> = list.hypotheses.iter().map(|h| h.ondevice_cost()).collect();
            prop_assert!(costs.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

fn sim_queries(g: &QueryGrammar, n: usize) -> Vec<String> {
    (0..n).map(|i| g.query(i % g.templates().len(), (i * 7) % g.entities().len())).collect()
}

#[test]
fn no_confusion_puts_reference_first() {
    let g = QueryGrammar::bundled();
    let queries = sim_queries(&g, 300);
    let noise = NoiseConfig {
        confusion_rate: 0.0,
        ..NoiseConfig::default()
    };
    let lists = simulate_nbest(&queries, &g, &noise, 1, "u").unwrap();
    let mut retained = 0;
    for l in &lists {
        if l.hypotheses.iter().any(|h| h.text() == l.reference) {
            retained += 1;
            assert_eq!(l.hypotheses[0].text(), l.reference);
        }
    }
    assert!(retained > 200);
}

#[test]
fn full_confusion_keeps_reference_below_rank_one() {
    let g = QueryGrammar::bundled();
    let queries = sim_queries(&g, 300);
    let noise = NoiseConfig {
        confusion_rate: 1.0,
        retention: 1.0,
        drop_rate: 0.0,
        ..NoiseConfig::default()
    };
    let lists = simulate_nbest(&queries, &g, &noise, 2, "u").unwrap();
    for l in &lists {
        let pos = l.hypotheses.iter().position(|h| h.text() == l.reference).expect("retained");
        assert!(pos > 0);
    }
    assert_eq!(oracle_wer(&lists, OracleMode::Best).unwrap(), 0.0);
    let base: EditCounts = selected_counts(&lists, &rank1_selections(&lists)).unwrap().into_iter().sum();
    assert!(base.wer().unwrap() > 0.0);
}

#[test]
fn retention_and_drop_extremes() {
    let g = QueryGrammar::bundled();
    let queries = sim_queries(&g, 100);
    let never = NoiseConfig {
        retention: 0.0,
        drop_rate: 0.0,
        ..NoiseConfig::default()
    };
    for l in simulate_nbest(&queries, &g, &never, 3, "u").unwrap() {
        assert!(!l.hypotheses.is_empty());
        assert!(l.hypotheses.iter().all(|h| h.text() != l.reference));
    }
    let dropped = NoiseConfig {
        drop_rate: 1.0,
        ..NoiseConfig::default()
    };
    assert!(simulate_nbest(&queries, &g, &dropped, 3, "u").unwrap().iter().all(|l| l.is_empty()));
    let bad = NoiseConfig {
        confusion_rate: 1.5,
        ..NoiseConfig::default()
    };
    assert!(matches!(simulate_nbest(&queries, &g, &bad, 3, "u"), Err(DatagenError::BadNoise(_))));
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let g = QueryGrammar::bundled();
    let queries = sim_queries(&g, 50);
    let noise = NoiseConfig::default();
    let a = simulate_nbest(&queries, &g, &noise, 9, "v").unwrap();
    let b = simulate_nbest(&queries, &g, &noise, 9, "v").unwrap();
    let c = simulate_nbest(&queries, &g, &noise, 10, "v").unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a[3].utterance_id, "v00003");
}

#[test]
fn entity_swaps_use_catalog_entities() {
    let g = QueryGrammar::bundled();
    let queries = sim_queries(&g, 50);
    let noise = NoiseConfig {
        entity_substitution_rate: 1.0,
        drop_rate: 0.0,
        ..NoiseConfig::default()
    };
    let entities: BTreeSet<&str> = g.entities().iter().map(|(e, _)| e.as_str()).collect();
    for l in simulate_nbest(&queries, &g, &noise, 4, "u").unwrap() {
        for h in &l.hypotheses {
            assert!(g.decompositions(h.text()).any(|(_, e)| entities.contains(e)), "{}", h.text());
        }
    }
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let queries: QueryCounts = [("play red smoke".to_string(), 4), ("stop".to_string(), 1)].into();
    write_corpus(&queries, dir.path(), "train").unwrap();
    let text = std::fs::read_to_string(dir.path().join("train.txt")).unwrap();
    assert_eq!(text, "play red smoke\nstop\n");
    assert_eq!(read_frequencies(&dir.path().join("train.freq.tsv")).unwrap(), queries);
}
