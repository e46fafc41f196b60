//! Rescore simulated N-best lists with an n-gram feature: extract features,
//! tune fusion weights with Powell's method on validation, apply to test.

use nbest_rescore::datagen::{apply_cutoffs, sample_queries, simulate_nbest, split_corpus, NoiseConfig, QueryGrammar, Sampler};
use nbest_rescore::fusion::{extract_features, rescore, tune_weights, NGramScorer, ScorerRegistry, TuneOptions, TuningData};
use nbest_rescore::metrics::{corpus_wer, rank1_selections};
use nbest_rescore::nbest::NBestList;
use nbest_rescore::ngram::NGramTrainer;

fn wer(lists: &[NBestList], chosen: &nbest_rescore::metrics::Selections) -> f64 {
    let pairs: Vec<(&str, Option<&str>)> = lists
        .iter()
        .map(|l| (l.reference.as_str(), chosen[&l.utterance_id].map(|i| l.hypotheses[i].text())))
        .collect();
    corpus_wer(&pairs).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grammar = apply_cutoffs(&QueryGrammar::bundled(), 50, 1000);
    let queries = sample_queries(&grammar, 11, Sampler::Poissonized)?;
    let (train, validation, test) = split_corpus(&queries, [0.8, 0.1, 0.1], 11)?;
    let lm = NGramTrainer::new(3).train_weighted(train.iter().map(|(q, &c)| (q.as_str(), c)))?;

    let noise = NoiseConfig::default();
    let pick = |q: &nbest_rescore::datagen::QueryCounts| q.keys().take(500).cloned().collect::<Vec<_>>();
    let val = simulate_nbest(&pick(&validation), &grammar, &noise, 1, "val-")?;
    let tst = simulate_nbest(&pick(&test), &grammar, &noise, 2, "test-")?;

    let mut registry = ScorerRegistry::new();
    registry.register(Box::new(NGramScorer::new("ngram", lm)))?;
    let val_feats = extract_features(&val, &registry)?;
    let tst_feats = extract_features(&tst, &registry)?;

    let tuned = tune_weights(&TuningData::new(&val, &val_feats)?, &TuneOptions::default(), None)?;
    println!("weights: {:?}", tuned.weights);
    println!(
        "validation WER {:.2}% -> {:.2}% in {} iterations",
        100.0 * tuned.baseline_objective,
        100.0 * tuned.objective,
        tuned.iterations
    );
    let rescored = rescore(&tst, &tst_feats, &tuned.weights)?;
    println!(
        "test WER {:.2}% -> {:.2}%",
        100.0 * wer(&tst, &rank1_selections(&tst)),
        100.0 * wer(&tst, &rescored)
    );
    Ok(())
}
