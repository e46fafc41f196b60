//! Feature extraction from language-model scorers, linear score fusion and
//! WER-driven weight tuning.

mod powell;
mod tune;

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{MetricsError, Selections};
use crate::nbest::{FeatureMatrix, FusionWeights, NBestError, NBestList, ACOUSTIC};
use crate::ngram::NGramModel;
use crate::nnlm::NnlmModel;
use crate::subword::SubwordModel;

pub use powell::{powell_minimize, PowellOptions, PowellResult};
pub use tune::{tune_weights, Objective, TrajectoryPoint, TuneOptions, TuneResult, TuningData};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("scorer `{scorer}` failed on utterance `{utterance}`: {message}")]
    Scorer {
        scorer: String,
        utterance: String,
        message: String,
    },
    #[error("duplicate scorer `{0}`")]
    DuplicateScorer(String),
    #[error("weights {weights:?} do not match feature columns {columns:?}")]
    Mismatch { weights: Vec<String>, columns: Vec<String> },
    #[error("objective is not finite at {0:?}")]
    NonFinite(Vec<f64>),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("feature cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error(transparent)]
    Features(#[from] NBestError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A server-side language model exposed as a per-hypothesis cost
/// (negative natural-log likelihood).
pub trait Scorer: Send + Sync {
    /// Feature column name.
    fn name(&self) -> &str;

    /// Namespace for cached values; should change whenever the model does.
    fn cache_id(&self) -> String {
        self.name().to_string()
    }

    fn score(&self, text: &str) -> Result<f64, String>;

    /// Scores many texts; the default runs [`score`](Self::score) in parallel.
    fn score_batch(&self, texts: &[&str]) -> Vec<Result<f64, String>> {
        texts.par_iter().map(|t| self.score(t)).collect()
    }
}

/// Gives a scorer an explicit cache namespace, e.g. one derived from a hash
/// of its model file.
pub struct WithCacheId {
    inner: Box<dyn Scorer>,
    id: String,
}

impl WithCacheId {
    pub fn new(inner: Box<dyn Scorer>, id: impl Into<String>) -> Self {
        Self { inner, id: id.into() }
    }
}

impl Scorer for WithCacheId {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn cache_id(&self) -> String {
        self.id.clone()
    }

    fn score(&self, text: &str) -> Result<f64, String> {
        self.inner.score(text)
    }

    fn score_batch(&self, texts: &[&str]) -> Vec<Result<f64, String>> {
        self.inner.score_batch(texts)
    }
}

pub struct NGramScorer {
    name: String,
    model: NGramModel,
}

impl NGramScorer {
    pub fn new(name: impl Into<String>, model: NGramModel) -> Self {
        Self {
            name: name.into(),
            model,
        }
    }
}

impl Scorer for NGramScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, text: &str) -> Result<f64, String> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        Ok(-self.model.sentence_logprob(&words))
    }
}

pub struct NnlmScorer {
    name: String,
    model: NnlmModel,
    tokenizer: SubwordModel,
}

impl NnlmScorer {
    pub fn new(name: impl Into<String>, model: NnlmModel, tokenizer: SubwordModel) -> Self {
        Self {
            name: name.into(),
            model,
            tokenizer,
        }
    }
}

impl Scorer for NnlmScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, text: &str) -> Result<f64, String> {
        crate::nnlm::nnlm_sequence_nll(&self.model, text, &self.tokenizer).map_err(|e| e.to_string())
    }
}

/// Wraps a closure; handy for oracle or diagnostic features.
pub struct FnScorer<F> {
    name: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&str) -> Result<f64, String> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&str) -> Result<f64, String> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, text: &str) -> Result<f64, String> {
        (self.f)(text)
    }
}

/// Ordered set of scorers plus an optional on-disk feature cache.
#[derive(Default)]
pub struct ScorerRegistry {
    scorers: Vec<Box<dyn Scorer>>,
    cache_dir: Option<PathBuf>,
}

impl ScorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Values are cached in `dir`, one JSON-lines file per scorer keyed by
    /// the SHA-256 of the hypothesis text.
    pub fn with_cache(dir: impl Into<PathBuf>) -> Self {
        Self {
            scorers: Vec::new(),
            cache_dir: Some(dir.into()),
        }
    }

    pub fn register(&mut self, scorer: Box<dyn Scorer>) -> Result<(), FusionError> {
        if self.scorers.iter().any(|s| s.name() == scorer.name()) {
            return Err(FusionError::DuplicateScorer(scorer.name().to_string()));
        }
        self.scorers.push(scorer);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.scorers.iter().map(|s| s.name().to_string()).collect()
    }

    pub fn cache_ids(&self) -> Vec<String> {
        self.scorers.iter().map(|s| s.cache_id()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.scorers.is_empty()
    }
}

pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    cost: f64,
}

struct FeatureCache {
    path: PathBuf,
    values: HashMap<String, f64>,
}

impl FeatureCache {
    fn open(dir: &Path, cache_id: &str) -> Result<Self, FusionError> {
        fs::create_dir_all(dir)?;
        let file: String = cache_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = dir.join(format!("{file}.jsonl"));
        let mut values = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| FusionError::Cache {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })?;
                values.insert(entry.key, entry.cost);
            }
        }
        Ok(Self { path, values })
    }

    fn append(&mut self, entries: &[(String, f64)]) -> Result<(), FusionError> {
        let mut out = String::new();
        for (key, cost) in entries {
            out.push_str(&serde_json::to_string(&CacheLine {
                key: key.clone(),
                cost: *cost,
            })?);
            out.push('\n');
            self.values.insert(key.clone(), *cost);
        }
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?
            .write_all(out.as_bytes())?;
        Ok(())
    }
}

/// Builds one feature matrix per list: the two on-device columns followed
/// by one column per registered scorer, in registration order.
pub fn extract_features(dataset: &[NBestList], registry: &ScorerRegistry) -> Result<Vec<FeatureMatrix>, FusionError> {
    let mut matrices: Vec<FeatureMatrix> = dataset.iter().map(FeatureMatrix::ondevice).collect();
    let mut unique: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for list in dataset {
        for h in &list.hypotheses {
            if seen.insert(h.text()) {
                unique.push(h.text());
            }
        }
    }
    for scorer in &registry.scorers {
        let mut cache = match &registry.cache_dir {
            Some(dir) => Some(FeatureCache::open(dir, &scorer.cache_id())?),
            None => None,
        };
        let mut values: HashMap<&str, f64> = HashMap::new();
        let mut missing = Vec::new();
        for &t in &unique {
            match cache.as_ref().and_then(|c| c.values.get(&text_key(t))) {
                Some(&v) => {
                    values.insert(t, v);
                }
                None => missing.push(t),
            }
        }
        let results = scorer.score_batch(&missing);
        let mut fresh = Vec::new();
        for (&t, r) in missing.iter().zip(results) {
            let failure = match r {
                Ok(v) if v.is_finite() => {
                    values.insert(t, v);
                    fresh.push((text_key(t), v));
                    continue;
                }
                Ok(v) => format!("non-finite cost {v} for `{t}`"),
                Err(e) => e,
            };
            let utterance = dataset
                .iter()
                .find(|l| l.hypotheses.iter().any(|h| h.text() == t))
                .map(|l| l.utterance_id.clone())
                .unwrap_or_default();
            // Keep what was scored so far.
            if let Some(c) = cache.as_mut() {
                c.append(&fresh)?;
            }
            return Err(FusionError::Scorer {
                scorer: scorer.name().to_string(),
                utterance,
                message: failure,
            });
        }
        if let Some(c) = cache.as_mut() {
            if !fresh.is_empty() {
                c.append(&fresh)?;
            }
        }
        for (m, list) in matrices.iter_mut().zip(dataset) {
            let col: Vec<f64> = list.hypotheses.iter().map(|h| values[h.text()]).collect();
            m.push_column(scorer.name(), &col)?;
        }
    }
    Ok(matrices)
}

/// Dot product of one feature row with the weights.
pub fn combined_cost(row: &[f64], weights: &FusionWeights) -> Result<f64, FusionError> {
    if row.len() != weights.weights.len() {
        return Err(FusionError::Mismatch {
            weights: weights.names.clone(),
            columns: vec![format!("<{} values>", row.len())],
        });
    }
    Ok(row.iter().zip(&weights.weights).map(|(x, w)| x * w).sum())
}

/// Index of the lowest-cost row; ties go to the lower rank.
pub(crate) fn argmin_row(rows: &[Vec<f64>], weights: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        let c: f64 = row.iter().zip(weights).map(|(x, w)| x * w).sum();
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

fn check_columns(features: &FeatureMatrix, weights: &FusionWeights) -> Result<(), FusionError> {
    if features.columns != weights.names {
        return Err(FusionError::Mismatch {
            weights: weights.names.clone(),
            columns: features.columns.clone(),
        });
    }
    Ok(())
}

/// Picks the lowest combined cost per utterance; empty lists select nothing.
pub fn rescore(
    dataset: &[NBestList],
    features: &[FeatureMatrix],
    weights: &FusionWeights,
) -> Result<Selections, FusionError> {
    let mut out = Selections::new();
    for (list, fm) in dataset.iter().zip(features) {
        check_columns(fm, weights)?;
        fm.validate(list)?;
        out.insert(list.utterance_id.clone(), argmin_row(&fm.values, &weights.weights));
    }
    Ok(out)
}

/// Keeps only the named columns (the on-device pair is always kept).
pub fn select_columns(features: &[FeatureMatrix], keep: &[&str]) -> Vec<FeatureMatrix> {
    features
        .iter()
        .map(|fm| {
            let idx: Vec<usize> = (0..fm.columns.len())
                .filter(|&i| i < 2 || keep.contains(&fm.columns[i].as_str()))
                .collect();
            FeatureMatrix {
                utterance_id: fm.utterance_id.clone(),
                columns: idx.iter().map(|&i| fm.columns[i].clone()).collect(),
                values: fm.values.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsProvenance {
    pub dataset_hash: String,
    pub scorer_ids: Vec<String>,
    pub options: serde_json::Value,
}

/// Versioned on-disk form of tuned weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub version: u32,
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub provenance: WeightsProvenance,
}

impl WeightsFile {
    pub fn new(weights: &FusionWeights, provenance: WeightsProvenance) -> Self {
        Self {
            version: 1,
            names: weights.names.clone(),
            weights: weights.weights.clone(),
            provenance,
        }
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        FusionWeights {
            names: self.names.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        let w: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if w.names.len() != w.weights.len() || w.names.first().map(String::as_str) != Some(ACOUSTIC) {
            return Err(FusionError::Mismatch {
                weights: w.names.clone(),
                columns: vec![ACOUSTIC.to_string()],
            });
        }
        Ok(w)
    }
}

/// SHA-256 over the canonical JSON of a dataset.
pub fn dataset_hash(dataset: &[NBestList]) -> String {
    let mut h = Sha256::new();
    for list in dataset {
        h.update(serde_json::to_vec(list).expect("n-best lists serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests;
