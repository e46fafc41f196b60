//! Synthetic on-device N-best lists. Competitors are built from the
//! reference by swapping its entity for another catalog entity or by small
//! character edits; costs are drawn so the reference lands at rank 1 unless
//! the utterance is "confused".

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatagenError, QueryGrammar};
use crate::nbest::{Hypothesis, NBestList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Probability that some competitor outranks the reference.
    pub confusion_rate: f64,
    /// Probability that the reference appears in the list at all.
    pub retention: f64,
    /// Probability of an empty list.
    pub drop_rate: f64,
    /// Upper bound on the number of competitors per list.
    pub max_alternatives: usize,
    /// Standard deviation multiplier for the cost noise.
    pub score_noise_scale: f64,
    /// Share of competitors made by entity substitution; the rest are
    /// character edits.
    pub entity_substitution_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            confusion_rate: 0.3,
            retention: 0.9,
            drop_rate: 0.1,
            max_alternatives: 6,
            score_noise_scale: 1.0,
            entity_substitution_rate: 0.5,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        for (name, p) in [
            ("confusion_rate", self.confusion_rate),
            ("retention", self.retention),
            ("drop_rate", self.drop_rate),
            ("entity_substitution_rate", self.entity_substitution_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DatagenError::BadNoise(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.max_alternatives == 0 {
            return Err(DatagenError::BadNoise("max_alternatives must be at least 1".into()));
        }
        if !(self.score_noise_scale.is_finite() && self.score_noise_scale >= 0.0) {
            return Err(DatagenError::BadNoise(format!(
                "score_noise_scale = {} must be finite and non-negative",
                self.score_noise_scale
            )));
        }
        Ok(())
    }
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn char_edit(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<Vec<u8>> = text.split(' ').map(|w| w.as_bytes().to_vec()).collect();
    for _ in 0..rng.random_range(1..=2) {
        let n = words.len();
        let w = &mut words[rng.random_range(0..n)];
        let c = LETTERS[rng.random_range(0..LETTERS.len())];
        match rng.random_range(0..3) {
            0 => {
                let i = rng.random_range(0..w.len());
                w[i] = c;
            }
            1 => {
                let i = rng.random_range(0..=w.len());
                w.insert(i, c);
            }
            _ if w.len() > 1 => {
                w.remove(rng.random_range(0..w.len()));
            }
            _ => w.push(c),
        }
    }
    // Only ASCII letters are ever inserted, but the input may hold anything.
    words
        .into_iter()
        .map(|w| String::from_utf8_lossy(&w).into_owned())
        .collect::<Vec<_>>()
        .join(" ")
}

fn entity_swap(query: &str, grammar: &QueryGrammar, known: &HashSet<&str>, rng: &mut ChaCha8Rng) -> Option<String> {
    // Prefer a split whose entity is in the catalog; "play x now" also
    // matches "play {entity}" with entity "x now".
    let (t, current) = grammar
        .decompositions(query)
        .find(|(_, e)| known.contains(e))
        .or_else(|| grammar.decompositions(query).next())?;
    let entities = grammar.entities();
    if entities.len() < 2 {
        return None;
    }
    let e = loop {
        let e = rng.random_range(0..entities.len());
        if entities[e].0 != current {
            break e;
        }
    };
    Some(grammar.query(t, e))
}

fn word_count(text: &str) -> f64 {
    text.split(' ').count() as f64
}

/// Builds one N-best list per query. Ids are `{id_prefix}{index:05}`.
///
/// Non-reference hypotheses get acoustic cost `≈ 4.5` and LM cost `≈ 3` per
/// word plus Gaussian noise. The reference total cost is then placed
/// `U(0.1, 2)` below the best competitor, or above it for a confused
/// utterance, and split between the two columns at a random ratio. A list is
/// dropped (empty) with `drop_rate`; otherwise the reference is included with
/// probability `retention`.
pub fn simulate_nbest(
    queries: &[String],
    grammar: &QueryGrammar,
    noise: &NoiseConfig,
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<NBestList>, DatagenError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let known: HashSet<&str> = grammar.entities().iter().map(|(e, _)| e.as_str()).collect();
    let mut out = Vec::with_capacity(queries.len());
    for (i, query) in queries.iter().enumerate() {
        let id = format!("{id_prefix}{i:05}");
        let query = crate::nbest::normalize_text(query);
        if query.is_empty() || rng.random::<f64>() < noise.drop_rate {
            out.push(NBestList::new(id, query, vec![]));
            continue;
        }
        let retained = rng.random::<f64>() < noise.retention;
        let confused = rng.random::<f64>() < noise.confusion_rate;
        let wanted = rng.random_range(1..=noise.max_alternatives);

        let mut seen: HashSet<String> = HashSet::from([query.clone()]);
        let mut alts = Vec::with_capacity(wanted);
        for _ in 0..wanted * 10 {
            if alts.len() == wanted {
                break;
            }
            let cand = if rng.random::<f64>() < noise.entity_substitution_rate {
                entity_swap(&query, grammar, &known, &mut rng).unwrap_or_else(|| char_edit(&query, &mut rng))
            } else {
                char_edit(&query, &mut rng)
            };
            if seen.insert(cand.clone()) {
                alts.push(cand);
            }
        }
        if alts.is_empty() {
            // A query with no distinct corruption; keep the list non-empty.
            alts.push(format!("{query} {}", LETTERS[rng.random_range(0..LETTERS.len())] as char));
        }

        let s = noise.score_noise_scale;
        let mut hyps: Vec<(String, f64, f64)> = alts
            .into_iter()
            .map(|text| {
                let w = word_count(&text);
                let ac = 4.5 * w + s * gauss.sample(&mut rng);
                let lm = 3.0 * w + s * gauss.sample(&mut rng);
                (text, ac, lm)
            })
            .collect();
        // Drawn even when the reference is not retained, so the stream of
        // random numbers does not depend on retention.
        let gap = rng.random_range(0.1..2.0);
        let split = rng.random_range(0.5..0.7);
        if retained {
            let best = hyps.iter().map(|h| h.1 + h.2).fold(f64::INFINITY, f64::min);
            let total = if confused { best + gap } else { best - gap };
            hyps.push((query.clone(), total * split, total * (1.0 - split)));
        }
        hyps.sort_by(|a, b| (a.1 + a.2).total_cmp(&(b.1 + b.2)));
        let hypotheses = hyps
            .into_iter()
            .map(|(t, ac, lm)| Hypothesis::new(t, ac, lm))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DatagenError::BadNoise(e.to_string()))?;
        out.push(NBestList::new(id, query, hypotheses));
    }
    Ok(out)
}
