//! Sample a synthetic query corpus from the bundled media grammar, split it,
//! stratify the test split into head, torso and tail, and simulate
//! on-device N-best lists.

use nbest_rescore::datagen::{
    apply_cutoffs, sample_queries, simulate_nbest, split_corpus, stratify, total_occurrences, NoiseConfig,
    QueryGrammar, Sampler,
};
use nbest_rescore::metrics::{oracle_wer, rank1_selections, selected_counts, OracleMode, Population};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grammar = apply_cutoffs(&QueryGrammar::bundled(), 40, 500);
    let queries = sample_queries(&grammar, 7, Sampler::Poissonized)?;
    println!(
        "{} unique queries, {} occurrences",
        queries.len(),
        total_occurrences(&queries)
    );
    let (train, validation, test) = split_corpus(&queries, [0.9, 0.05, 0.05], 7)?;
    println!("train {} / validation {} / test {} unique", train.len(), validation.len(), test.len());

    let strat = stratify(&test, 100, 7)?;
    let noise = NoiseConfig::default();
    for pop in Population::ALL {
        let lists = simulate_nbest(&strat.samples[&pop], &grammar, &noise, 7, &format!("{pop}-"))?;
        let counts = selected_counts(&lists, &rank1_selections(&lists))?;
        let words: usize = counts.iter().map(|c| c.ref_len).sum();
        let errors: usize = counts.iter().map(|c| c.errors).sum();
        println!(
            "{pop:<5} partition {:>5}  rank-1 WER {:>5.2}%  oracle {:>5.2}%",
            strat.partitions[&pop].len(),
            100.0 * errors as f64 / words as f64,
            100.0 * oracle_wer(&lists, OracleMode::Best)?
        );
        if pop == Population::Head {
            let l = &lists[0];
            println!("      e.g. reference `{}`", l.reference);
            for h in &l.hypotheses {
                println!("           {:<40} {:>7.2}", h.text(), h.ondevice_cost());
            }
        }
    }
    Ok(())
}
