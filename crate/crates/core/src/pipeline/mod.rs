//! The experiment as a chain of stages that talk only through files.
//!
//! Every stage writes into its own directory under the output root and
//! finishes by writing `manifest.json` with SHA-256 hashes of its inputs
//! and outputs. A stage reads its predecessors' artifacts through their
//! manifests and refuses to run when one is missing or stale. Manifests hold
//! no timestamps or absolute paths, so identical configs produce identical
//! manifests.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    default_thresholds, EvalSetConfig, ExperimentConfig, FusionConfig, GrammarConfig, LlmConfig, NGramSweepConfig,
    NnlmSpec, SplitConfig,
};
pub use stages::{
    cmd_evaluate, cmd_generate, cmd_rescore, cmd_run, cmd_score, cmd_sweep_ngram, cmd_train_nnlm, cmd_tune,
    EvaluationSummary, SweepPoint, SweepReport, SystemReport, TuneSummary, BASELINE_SYSTEM, FUSION_SYSTEM, SETS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("{path} changed since `{stage}` wrote it: rerun `{stage}`")]
    StaleArtifact { stage: &'static str, path: PathBuf },
    #[error(transparent)]
    Datagen(#[from] crate::datagen::DatagenError),
    #[error(transparent)]
    NGram(#[from] crate::ngram::NGramError),
    #[error(transparent)]
    Subword(#[from] crate::subword::SubwordError),
    #[error(transparent)]
    Nnlm(#[from] crate::nnlm::NnlmError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    NBest(#[from] crate::nbest::NBestError),
    #[error("LLM endpoint: {0}")]
    Llm(#[from] crate::llmclient::LlmError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 1 usage, 2 data, 3 missing upstream artifact,
    /// 4 external service.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::MissingArtifact { .. } | PipelineError::StaleArtifact { .. } => 3,
            PipelineError::Llm(_) => 4,
            PipelineError::Fusion(crate::fusion::FusionError::Scorer { scorer, .. }) if scorer == "llm" => 4,
            _ => 2,
        }
    }
}

/// Derives an independent seed for one labelled use of the global seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Record of one successful stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    /// Paths relative to the output root, mapped to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific facts worth reading without opening the outputs.
    pub summary: serde_json::Value,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn path(out: &Path, stage: &str) -> PathBuf {
        out.join(stage).join(MANIFEST)
    }

    pub fn load(out: &Path, stage: &'static str) -> Result<Self, PipelineError> {
        let path = Self::path(out, stage);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { stage, path });
        }
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| PipelineError::Format {
            path,
            message: e.to_string(),
        })
    }

    /// Loads a predecessor's manifest and checks that its outputs are
    /// present and unchanged.
    pub fn load_verified(out: &Path, stage: &'static str) -> Result<Self, PipelineError> {
        let m = Self::load(out, stage)?;
        for (rel, hash) in &m.outputs {
            let path = out.join(rel);
            if !path.exists() {
                return Err(PipelineError::MissingArtifact { stage, path });
            }
            if &file_sha256(&path)? != hash {
                return Err(PipelineError::StaleArtifact { stage, path });
            }
        }
        Ok(m)
    }

    pub fn save(&self, out: &Path) -> Result<PathBuf, PipelineError> {
        let path = Self::path(out, &self.stage);
        fs::create_dir_all(path.parent().unwrap())?;
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")?;
        Ok(path)
    }
}

/// Hashes the given files (paths relative to `out`).
fn hash_files<'a>(out: &Path, rels: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<String, String>, PipelineError> {
    rels.into_iter()
        .map(|r| Ok((r.clone(), file_sha256(&out.join(r))?)))
        .collect()
}
