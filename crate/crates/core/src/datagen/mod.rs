//! Synthetic query data: a weighted template × entity grammar, coupon-collector
//! sampling, occurrence-level splits, frequency-rank stratification and an
//! N-best simulator.

mod grammar;
mod simulate;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Exp, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Population;

pub use grammar::{apply_cutoffs, QueryGrammar, SLOT};
pub use simulate::{simulate_nbest, NoiseConfig};

/// The media grammar shipped with the crate: 100 templates and 2000
/// entities with Zipf priors.
pub const BUNDLED_GRAMMAR: &str = include_str!("../../data/media_grammar.tsv");

/// Unique query strings with occurrence counts.
pub type QueryCounts = BTreeMap<String, u64>;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("grammar line {line}: {message}")]
    Grammar { line: usize, message: String },
    #[error("grammar has no {0}")]
    EmptyGrammar(&'static str),
    #[error("sampling exceeded the cap of {cap} draws with {missing} queries never drawn")]
    SamplingCap { cap: u64, missing: usize },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("{population} partition has {available} unique queries, {requested} requested")]
    PartitionTooSmall {
        population: Population,
        available: usize,
        requested: usize,
    },
    #[error("invalid noise config: {0}")]
    BadNoise(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How [`sample_queries`] draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Sampler {
    /// Literal i.i.d. draws until every query has appeared; errors after
    /// `cap` draws.
    Sequential { cap: u64 },
    /// Same distribution of final counts, computed in one pass: in the
    /// Poisson-time embedding each query's first arrival is exponential,
    /// sampling stops at the last first arrival, and every other query
    /// collects a Poisson number of repeats over its remaining time.
    Poissonized,
}

/// Samples `P(template) · P(entity)` until every (template, entity) pair
/// has been drawn at least once and returns all draws with multiplicity.
pub fn sample_queries(grammar: &QueryGrammar, seed: u64, sampler: Sampler) -> Result<QueryCounts, DatagenError> {
    let tp = grammar.template_probs();
    let ep = grammar.entity_probs();
    let (nt, ne) = (tp.len(), ep.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair_counts = vec![0u64; nt * ne];
    match sampler {
        Sampler::Sequential { cap } => {
            let td = WeightedIndex::new(&tp).expect("positive priors");
            let ed = WeightedIndex::new(&ep).expect("positive priors");
            let mut missing = nt * ne;
            let mut draws = 0u64;
            while missing > 0 {
                if draws >= cap {
                    return Err(DatagenError::SamplingCap { cap, missing });
                }
                draws += 1;
                let k = td.sample(&mut rng) * ne + ed.sample(&mut rng);
                if pair_counts[k] == 0 {
                    missing -= 1;
                }
                pair_counts[k] += 1;
            }
        }
        Sampler::Poissonized => {
            let probs: Vec<f64> = (0..nt * ne).map(|k| tp[k / ne] * ep[k % ne]).collect();
            let first: Vec<f64> = probs
                .iter()
                .map(|&p| Exp::new(p).expect("positive rate").sample(&mut rng))
                .collect();
            let (last, stop) = first
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (k, t)| if t > a.1 { (k, t) } else { a });
            for k in 0..probs.len() {
                let lambda = probs[k] * (stop - first[k]);
                let extra = if k == last || lambda <= 0.0 {
                    0
                } else {
                    Poisson::new(lambda).expect("finite rate").sample(&mut rng) as u64
                };
                pair_counts[k] = 1 + extra;
            }
        }
    }
    let mut out = QueryCounts::new();
    for (k, &c) in pair_counts.iter().enumerate() {
        *out.entry(grammar.query(k / ne, k % ne)).or_insert(0) += c;
    }
    Ok(out)
}

pub fn total_occurrences(q: &QueryCounts) -> u64 {
    q.values().sum()
}

/// Assigns every occurrence independently to train / validation / test with
/// the given probabilities.
pub fn split_corpus(
    queries: &QueryCounts,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(QueryCounts, QueryCounts, QueryCounts), DatagenError> {
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatagenError::BadRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = (QueryCounts::new(), QueryCounts::new(), QueryCounts::new());
    let rest = ratios[1] + ratios[2];
    for (q, &n) in queries {
        let train = Binomial::new(n, ratios[0].min(1.0)).expect("valid p").sample(&mut rng);
        let remaining = n - train;
        let val = if remaining == 0 || rest <= 0.0 {
            0
        } else {
            Binomial::new(remaining, (ratios[1] / rest).min(1.0))
                .expect("valid p")
                .sample(&mut rng)
        };
        let test = remaining - val;
        for (map, c) in [(&mut parts.0, train), (&mut parts.1, val), (&mut parts.2, test)] {
            if c > 0 {
                map.insert(q.clone(), c);
            }
        }
    }
    Ok(parts)
}

/// Frequency-rank partition of a split and the queries sampled from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    /// Unique queries of each population in rank order.
    pub partitions: BTreeMap<Population, Vec<String>>,
    /// Queries sampled without replacement from each partition.
    pub samples: BTreeMap<Population, Vec<String>>,
}

/// Unique queries ranked by descending count, ties broken by string.
pub fn rank_queries(split: &QueryCounts) -> Vec<(&str, u64)> {
    let mut ranked: Vec<(&str, u64)> = split.iter().map(|(q, &c)| (q.as_str(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
}

/// Rank boundaries `(head_end, torso_end)` for `n` unique queries: the top
/// 10% are head, the next 40% torso, the rest tail.
pub fn population_bounds(n: usize) -> (usize, usize) {
    (n * 10 / 100, n * 50 / 100)
}

pub fn stratify(split: &QueryCounts, per_population: usize, seed: u64) -> Result<Stratification, DatagenError> {
    let ranked = rank_queries(split);
    let (h, t) = population_bounds(ranked.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut partitions = BTreeMap::new();
    let mut samples = BTreeMap::new();
    for (pop, range) in [(Population::Head, 0..h), (Population::Torso, h..t), (Population::Tail, t..ranked.len())] {
        let part: Vec<String> = ranked[range].iter().map(|(q, _)| q.to_string()).collect();
        if part.len() < per_population {
            return Err(DatagenError::PartitionTooSmall {
                population: pop,
                available: part.len(),
                requested: per_population,
            });
        }
        let mut idx = rand::seq::index::sample(&mut rng, part.len(), per_population).into_vec();
        idx.sort_unstable();
        samples.insert(pop, idx.iter().map(|&i| part[i].clone()).collect());
        partitions.insert(pop, part);
    }
    Ok(Stratification { partitions, samples })
}

/// Writes `stem.txt` (one unique query per line) and `stem.freq.tsv`
/// (`query<TAB>count`).
pub fn write_corpus(queries: &QueryCounts, dir: &Path, stem: &str) -> Result<(), DatagenError> {
    let mut text = String::new();
    let mut freq = String::new();
    for (q, c) in queries {
        text.push_str(q);
        text.push('\n');
        writeln!(freq, "{q}\t{c}").unwrap();
    }
    fs::write(dir.join(format!("{stem}.txt")), text)?;
    fs::write(dir.join(format!("{stem}.freq.tsv")), freq)?;
    Ok(())
}

/// Reads a `query<TAB>count` file written by [`write_corpus`].
pub fn read_frequencies(path: &Path) -> Result<QueryCounts, DatagenError> {
    let mut out = QueryCounts::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        let (q, c) = line.rsplit_once('\t').ok_or_else(|| DatagenError::Grammar {
            line: i + 1,
            message: "expected `query<TAB>count`".into(),
        })?;
        let c: u64 = c.parse().map_err(|_| DatagenError::Grammar {
            line: i + 1,
            message: format!("bad count `{c}`"),
        })?;
        *out.entry(q.to_string()).or_insert(0) += c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
