use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::datagen::{NoiseConfig, QueryGrammar, Sampler};
use crate::fusion::{Objective, PowellOptions};
use crate::llmclient::LlmEndpointConfig;
use crate::nnlm::{Architecture, NnlmConfig, TrainSchedule};

/// Everything a run depends on. Output locations are not part of it, so
/// the same config hashes identically wherever it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grammar: GrammarConfig,
    pub split: SplitConfig,
    pub eval_sets: EvalSetConfig,
    pub ngram: NGramSweepConfig,
    pub nnlm: Vec<NnlmSpec>,
    pub fusion: FusionConfig,
    pub llm: LlmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    /// `"bundled"` or a path to a grammar TSV.
    pub source: String,
    pub top_templates: usize,
    pub top_entities: usize,
    pub sampler: Sampler,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            source: "bundled".into(),
            top_templates: 100,
            top_entities: 200_000,
            sampler: Sampler::Poissonized,
        }
    }
}

impl GrammarConfig {
    pub fn load(&self) -> Result<QueryGrammar, PipelineError> {
        Ok(if self.source == "bundled" {
            QueryGrammar::bundled()
        } else {
            QueryGrammar::load(Path::new(&self.source))?
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test shares of the query occurrences.
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.90, 0.05, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetConfig {
    /// Queries sampled from each of head, torso and tail.
    pub per_population: usize,
    pub noise: NoiseConfig,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            per_population: 1000,
            noise: NoiseConfig::default(),
        }
    }
}

/// Pruning thresholds `4^-k` for `k` in `4..=19`, plus 0 (no pruning).
pub fn default_thresholds() -> Vec<f64> {
    let mut t: Vec<f64> = (4..=19).map(|k| 4f64.powi(-k)).collect();
    t.push(0.0);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramSweepConfig {
    pub orders: Vec<usize>,
    pub thresholds: Vec<f64>,
}

impl Default for NGramSweepConfig {
    fn default() -> Self {
        Self {
            orders: vec![2, 3, 4],
            thresholds: default_thresholds(),
        }
    }
}

/// Architecture settings of one neural LM; the vocabulary size comes from
/// its sub-word model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnlmSpec {
    /// Feature column name.
    pub name: String,
    pub architecture: Architecture,
    pub layers: usize,
    pub embed_dim: usize,
    pub layer_dim: usize,
    #[serde(default = "one")]
    pub attention_heads: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "fofe_factor")]
    pub fofe_factor: f64,
    #[serde(default = "fofe_order")]
    pub fofe_order: usize,
    pub subword_vocab: usize,
    pub schedule: TrainSchedule,
}

fn one() -> usize {
    1
}
fn fofe_factor() -> f64 {
    0.85
}
fn fofe_order() -> usize {
    8
}

impl NnlmSpec {
    pub fn model_config(&self, vocab_size: usize) -> NnlmConfig {
        NnlmConfig {
            architecture: self.architecture,
            layers: self.layers,
            embed_dim: self.embed_dim,
            layer_dim: self.layer_dim,
            attention_heads: self.attention_heads,
            dropout: self.dropout,
            fofe_factor: self.fofe_factor,
            fofe_order: self.fofe_order,
            vocab_size,
        }
    }

    /// A small model of the given architecture that trains in well under a
    /// minute on one core.
    pub fn tiny(name: &str, architecture: Architecture) -> Self {
        Self {
            name: name.into(),
            architecture,
            layers: 1,
            embed_dim: 32,
            layer_dim: 32,
            attention_heads: 2,
            dropout: 0.0,
            fofe_factor: 0.85,
            fofe_order: 8,
            subword_vocab: 800,
            schedule: TrainSchedule {
                warmup_steps: 100,
                lr_min: 1e-4,
                lr_peak: 3e-3,
                decay_factor: 0.7,
                epochs: 4,
                steps_per_epoch: 500,
                batch_sequences: 16,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub powell: PowellOptions,
    /// Objective when tuning one server-side feature at a time.
    pub single_objective: Objective,
    /// Objective when tuning all server-side features together.
    pub fusion_objective: Objective,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            powell: PowellOptions::default(),
            single_objective: Objective::PopulationAverage,
            fusion_objective: Objective::PopulationAverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub enabled: bool,
    pub endpoint: LlmEndpointConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            grammar: GrammarConfig::default(),
            split: SplitConfig::default(),
            eval_sets: EvalSetConfig::default(),
            ngram: NGramSweepConfig::default(),
            nnlm: vec![
                NnlmSpec::tiny("fofe", Architecture::Fofe),
                NnlmSpec::tiny("lstm", Architecture::Lstm),
                NnlmSpec::tiny("transformer", Architecture::Transformer),
            ],
            fusion: FusionConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.grammar.top_templates == 0 || self.grammar.top_entities == 0 {
            return bad("grammar cutoffs must be at least 1".into());
        }
        let r = self.split.ratios;
        if r.iter().any(|x| x.is_nan() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {r:?} must be non-negative and sum to 1"));
        }
        if self.eval_sets.per_population == 0 {
            return bad("eval_sets.per_population must be at least 1".into());
        }
        self.eval_sets
            .noise
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.ngram.orders.is_empty() || self.ngram.thresholds.is_empty() {
            return bad("the n-gram sweep grid is empty".into());
        }
        if let Some(o) = self.ngram.orders.iter().find(|o| !(1..=5).contains(*o)) {
            return bad(format!("n-gram order {o} is outside 1..=5"));
        }
        if let Some(t) = self.ngram.thresholds.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
            return bad(format!("pruning threshold {t} must be finite and non-negative"));
        }
        let mut names = vec!["ngram".to_string(), "llm".to_string()];
        for spec in &self.nnlm {
            if names.contains(&spec.name) || spec.name.is_empty() || spec.name.contains('/') {
                return bad(format!("nnlm name `{}` is empty, reserved, duplicated or has a slash", spec.name));
            }
            names.push(spec.name.clone());
            spec.model_config(spec.subword_vocab)
                .validate()
                .map_err(|e| PipelineError::Config(format!("nnlm `{}`: {e}", spec.name)))?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// A scaled-down experiment (small grammar, short sweep, one small
    /// FOFE model) that runs in seconds. Useful for smoke tests and demos.
    pub fn quick() -> Self {
        let mut fofe = NnlmSpec::tiny("fofe", Architecture::Fofe);
        fofe.subword_vocab = 300;
        fofe.schedule.epochs = 2;
        fofe.schedule.steps_per_epoch = 100;
        fofe.schedule.warmup_steps = 20;
        Self {
            grammar: GrammarConfig {
                top_templates: 20,
                top_entities: 300,
                ..GrammarConfig::default()
            },
            eval_sets: EvalSetConfig {
                per_population: 40,
                ..EvalSetConfig::default()
            },
            ngram: NGramSweepConfig {
                orders: vec![2, 3],
                thresholds: vec![4f64.powi(-6), 4f64.powi(-10), 0.0],
            },
            nnlm: vec![fofe],
            ..Self::default()
        }
    }
}
