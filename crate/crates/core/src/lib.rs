pub mod metrics;
pub mod nbest;
pub mod ngram;
pub mod subword;
pub mod nnlm;
pub mod fusion;
pub mod datagen;
pub mod llmclient;
pub mod pipeline;
