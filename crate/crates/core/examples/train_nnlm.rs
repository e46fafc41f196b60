//! Train a small neural LM over sub-word units and compare sentence scores.
//!
//! Pass `fofe`, `lstm` or `transformer` to pick the architecture.

use nbest_rescore::datagen::{apply_cutoffs, sample_queries, QueryGrammar, Sampler};
use nbest_rescore::nnlm::{nnlm_sequence_nll, train_nnlm, Architecture, NnlmConfig, TrainSchedule};
use nbest_rescore::subword::train_subword;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let architecture = match std::env::args().nth(1).as_deref() {
        None | Some("transformer") => Architecture::Transformer,
        Some("lstm") => Architecture::Lstm,
        Some("fofe") => Architecture::Fofe,
        Some(other) => return Err(format!("unknown architecture `{other}`").into()),
    };
    let grammar = apply_cutoffs(&QueryGrammar::bundled(), 30, 300);
    let queries = sample_queries(&grammar, 3, Sampler::Poissonized)?;
    let tokenizer = train_subword(queries.iter().map(|(q, &c)| (q.as_str(), c)), 300)?;
    let corpus: Vec<(Vec<u32>, u64)> = queries.iter().map(|(q, &c)| (tokenizer.encode(q).ids, c)).collect();

    let config = NnlmConfig {
        embed_dim: 32,
        layer_dim: 32,
        layers: 1,
        ..NnlmConfig::tiny(architecture, tokenizer.vocab_size())
    };
    let schedule = TrainSchedule {
        warmup_steps: 50,
        lr_min: 1e-4,
        lr_peak: 3e-3,
        decay_factor: 0.7,
        epochs: 3,
        steps_per_epoch: 200,
        batch_sequences: 16,
    };
    let (model, log) = train_nnlm(config, &schedule, &corpus, 3)?;
    for e in &log.epochs {
        println!("epoch {}: mean loss {:.3} nats/token, lr {:.2e}", e.epoch, e.mean_loss, e.final_lr);
    }
    println!("{architecture}: {} parameters", model.parameter_count());

    let seen = queries.keys().next().unwrap().clone();
    let mangled: String = seen.chars().rev().collect();
    for text in [seen.as_str(), mangled.as_str()] {
        println!("{text:<40} NLL {:>7.2}", nnlm_sequence_nll(&model, text, &tokenizer)?);
    }
    Ok(())
}
