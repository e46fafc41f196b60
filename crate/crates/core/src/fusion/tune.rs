use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmin_row, check_columns, powell_minimize, FusionError, PowellOptions};
use crate::metrics::hypothesis_errors;
use crate::nbest::{FeatureMatrix, FusionWeights, NBestList, ACOUSTIC};

/// What the tuner minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Corpus WER over all utterances together.
    #[default]
    Pooled,
    /// Unweighted mean of per-group corpus WERs.
    PopulationAverage,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneOptions {
    pub powell: PowellOptions,
    pub objective: Objective,
}

struct Utterance {
    rows: Vec<Vec<f64>>,
    errors: Vec<usize>,
    empty_errors: usize,
    ref_len: usize,
    group: usize,
}

/// Validation data prepared for repeated WER evaluation: feature rows plus
/// precomputed edit counts of every hypothesis.
pub struct TuningData {
    columns: Vec<String>,
    utterances: Vec<Utterance>,
    groups: usize,
}

impl TuningData {
    /// All utterances form one group.
    pub fn new(dataset: &[NBestList], features: &[FeatureMatrix]) -> Result<Self, FusionError> {
        Self::grouped(&[(dataset, features)])
    }

    /// One group per `(lists, features)` part, e.g. per population.
    pub fn grouped(parts: &[(&[NBestList], &[FeatureMatrix])]) -> Result<Self, FusionError> {
        let mut columns: Option<Vec<String>> = None;
        let mut utterances = Vec::new();
        for (group, (lists, feats)) in parts.iter().enumerate() {
            if lists.len() != feats.len() {
                return Err(FusionError::Mismatch {
                    weights: vec![],
                    columns: vec![format!("{} lists vs {} matrices", lists.len(), feats.len())],
                });
            }
            for (list, fm) in lists.iter().zip(feats.iter()) {
                fm.validate(list)?;
                match &columns {
                    None => columns = Some(fm.columns.clone()),
                    Some(c) if *c != fm.columns => {
                        return Err(FusionError::Mismatch {
                            weights: c.clone(),
                            columns: fm.columns.clone(),
                        })
                    }
                    _ => {}
                }
                let (per_hyp, empty) = hypothesis_errors(list);
                utterances.push(Utterance {
                    rows: fm.values.clone(),
                    errors: per_hyp.iter().map(|c| c.errors).collect(),
                    empty_errors: empty.errors,
                    ref_len: empty.ref_len,
                    group,
                });
            }
        }
        let columns = columns.ok_or(FusionError::EmptyValidation)?;
        Ok(Self {
            columns,
            utterances,
            groups: parts.len(),
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Per-group `(errors, reference words)` under `weights`.
    fn counts(&self, weights: &[f64]) -> Vec<(usize, usize)> {
        let per: Vec<(usize, usize, usize)> = self
            .utterances
            .par_iter()
            .map(|u| {
                let e = match argmin_row(&u.rows, weights) {
                    Some(i) => u.errors[i],
                    None => u.empty_errors,
                };
                (u.group, e, u.ref_len)
            })
            .collect();
        let mut out = vec![(0, 0); self.groups];
        for (g, e, r) in per {
            out[g].0 += e;
            out[g].1 += r;
        }
        out
    }

    /// Pooled corpus WER under `weights`.
    pub fn wer(&self, weights: &[f64]) -> f64 {
        let (e, r) = self.counts(weights).iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        e as f64 / r.max(1) as f64
    }

    pub fn objective(&self, weights: &[f64], objective: Objective) -> f64 {
        match objective {
            Objective::Pooled => self.wer(weights),
            Objective::PopulationAverage => {
                let counts = self.counts(weights);
                let wers: Vec<f64> = counts
                    .iter()
                    .filter(|(_, r)| *r > 0)
                    .map(|&(e, r)| e as f64 / r as f64)
                    .collect();
                wers.iter().sum::<f64>() / wers.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub cycle: usize,
    pub weights: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub weights: FusionWeights,
    /// Objective at the on-device baseline weights.
    pub baseline_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Tunes every weight except the acoustic one (fixed at 1) with Powell's
/// method against validation WER.
///
/// The search starts from the on-device baseline `(1, 1, 0, …)`, or from
/// `warm_start` when it scores at least as well, so the result never does
/// worse than the baseline on the validation data.
pub fn tune_weights(
    data: &TuningData,
    options: &TuneOptions,
    warm_start: Option<&FusionWeights>,
) -> Result<TuneResult, FusionError> {
    if data.is_empty() {
        return Err(FusionError::EmptyValidation);
    }
    let anchor = data
        .columns
        .iter()
        .position(|c| c == ACOUSTIC)
        .ok_or_else(|| FusionError::Mismatch {
            weights: vec![ACOUSTIC.to_string()],
            columns: data.columns.clone(),
        })?;
    let baseline = FusionWeights::baseline(&data.columns);
    let full = |free: &[f64]| -> Vec<f64> {
        let mut w = Vec::with_capacity(free.len() + 1);
        w.extend_from_slice(&free[..anchor]);
        w.push(1.0);
        w.extend_from_slice(&free[anchor..]);
        w
    };
    let free_of = |w: &[f64]| -> Vec<f64> {
        w.iter().enumerate().filter(|&(i, _)| i != anchor).map(|(_, &v)| v).collect()
    };
    let baseline_objective = data.objective(&baseline.weights, options.objective);
    let mut start = free_of(&baseline.weights);
    if let Some(ws) = warm_start {
        let fm = FeatureMatrix {
            utterance_id: String::new(),
            columns: data.columns.clone(),
            values: vec![],
        };
        check_columns(&fm, ws)?;
        let mut w = ws.weights.clone();
        w[anchor] = 1.0;
        if data.objective(&w, options.objective) <= baseline_objective {
            start = free_of(&w);
        }
    }
    let result = powell_minimize(
        |free| data.objective(&full(free), options.objective),
        &start,
        &options.powell,
    )?;
    let trajectory = result
        .trajectory
        .iter()
        .enumerate()
        .map(|(cycle, (x, v))| TrajectoryPoint {
            cycle,
            weights: full(x),
            objective: *v,
        })
        .collect();
    Ok(TuneResult {
        weights: FusionWeights {
            names: data.columns.clone(),
            weights: full(&result.x),
        },
        baseline_objective,
        objective: result.value,
        iterations: result.iterations,
        evaluations: result.evaluations,
        trajectory,
    })
}
