//! Train a Witten-Bell n-gram model, prune it and round-trip it through ARPA.

use nbest_rescore::ngram::{prune_ngram, read_arpa, write_arpa, NGramTrainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = [
        ("play red smoke", 40),
        ("play songs by red smoke", 12),
        ("play the reytons", 25),
        ("put on the reytons", 6),
        ("shuffle marla please", 3),
        ("play marla", 9),
    ];
    let model = NGramTrainer::new(3).train_weighted(corpus.iter().map(|&(q, c)| (q, c)))?;
    println!("trained: {} n-grams", model.total_ngrams());

    for threshold in [1e-5, 1e-3, 1e-1] {
        let (pruned, stats) = prune_ngram(&model, threshold);
        println!("threshold {threshold:e}: {} n-grams kept ({stats:?})", pruned.total_ngrams());
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("lm.arpa");
    write_arpa(&model, &path)?;
    let back = read_arpa(&path)?;
    for s in ["play red smoke", "play red smoke please", "smoke red play"] {
        let words: Vec<&str> = s.split(' ').collect();
        println!(
            "{s:<24} log p = {:>8.4} (from ARPA {:>8.4})",
            model.sentence_logprob(&words),
            back.sentence_logprob(&words)
        );
    }
    Ok(())
}
