//! Back-off word n-gram language model.
//!
//! Probabilities are estimated with Witten-Bell discounting and stored as a
//! pure back-off model: an explicit log-probability per stored n-gram, plus a
//! back-off weight per context. Internally all values are natural logs; the
//! ARPA reader/writer converts to and from log10 at the file boundary.

mod arpa;
mod prune;
mod train;

use std::collections::{BTreeMap, HashMap};
use std::ops::Bound;

use thiserror::Error;

pub use arpa::{read_arpa, write_arpa, parse_arpa, to_arpa_string};
pub use prune::{prune_ngram, PruneStats};
pub use train::{train_ngram, NGramTrainer};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Highest supported order.
pub const MAX_ORDER: usize = 5;
const ID_BITS: u32 = 24;
const MAX_VOCAB: usize = 1 << ID_BITS;

#[derive(Debug, Error)]
pub enum NGramError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("order {0} outside 1..={MAX_ORDER}")]
    BadOrder(usize),
    #[error("vocabulary exceeds {MAX_VOCAB} words")]
    VocabTooLarge,
    #[error("ARPA line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type WordId = u32;

/// N-gram of up to [`MAX_ORDER`] word ids packed into one integer, first word
/// in the most significant position so that integer order matches
/// lexicographic order of equal-length id sequences.
pub(crate) fn pack(ids: &[WordId]) -> u128 {
    ids.iter().fold(0u128, |acc, &id| (acc << ID_BITS) | id as u128)
}

pub(crate) fn unpack(key: u128, len: usize) -> Vec<WordId> {
    let mask = (1u128 << ID_BITS) - 1;
    (0..len)
        .rev()
        .map(|i| ((key >> (ID_BITS as usize * i)) & mask) as WordId)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, WordId>,
}

impl Vocab {
    pub(crate) fn with_specials() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [BOS, EOS, UNK] {
            v.insert(w);
        }
        v
    }

    pub(crate) fn insert(&mut self, word: &str) -> WordId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as WordId;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Entry {
    /// ln p(w | h)
    pub logprob: f64,
    /// ln back-off weight of this n-gram used as a context.
    pub backoff: Option<f64>,
}

/// Back-off n-gram model with natural-log parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab: Vocab,
    /// `grams[k - 1]` holds the n-grams of order `k`.
    grams: Vec<BTreeMap<u128, Entry>>,
    sentence_markers: bool,
}

impl NGramModel {
    pub(crate) fn empty(order: usize, vocab: Vocab, sentence_markers: bool) -> Self {
        Self {
            order,
            vocab,
            grams: vec![BTreeMap::new(); order],
            sentence_markers,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Whether sentences are scored with an implicit begin context and an
    /// explicit end token.
    pub fn sentence_markers(&self) -> bool {
        self.sentence_markers
    }

    /// Number of stored n-grams of order `k` (1-based).
    pub fn count(&self, k: usize) -> usize {
        self.grams.get(k - 1).map_or(0, BTreeMap::len)
    }

    pub fn total_ngrams(&self) -> usize {
        self.grams.iter().map(BTreeMap::len).sum()
    }

    pub(crate) fn entry(&self, ids: &[WordId]) -> Option<&Entry> {
        if ids.is_empty() || ids.len() > self.order {
            return None;
        }
        self.grams[ids.len() - 1].get(&pack(ids))
    }

    /// Explicit ln-probability of a stored n-gram, if present.
    pub fn explicit_logprob(&self, ids: &[WordId]) -> Option<f64> {
        self.entry(ids).map(|e| e.logprob)
    }

    /// ln back-off weight of a context; 0 when none is stored.
    pub fn backoff(&self, context: &[WordId]) -> f64 {
        self.entry(context).and_then(|e| e.backoff).unwrap_or(0.0)
    }

    /// Stored n-grams of order `context.len() + 1` extending `context`.
    pub(crate) fn followers(&self, context: &[WordId]) -> impl Iterator<Item = (WordId, &Entry)> + '_ {
        let k = context.len() + 1;
        let (lo, hi) = if context.is_empty() {
            (0u128, u128::MAX)
        } else {
            let base = pack(context) << ID_BITS;
            (base, base | ((1u128 << ID_BITS) - 1))
        };
        let map = self.grams.get(k - 1);
        map.into_iter()
            .flat_map(move |m| m.range((Bound::Included(lo), Bound::Included(hi))))
            .map(|(key, e)| ((*key & ((1u128 << ID_BITS) - 1)) as WordId, e))
    }

    /// Words that can be predicted: the whole vocabulary except the begin marker.
    pub fn predictable(&self) -> impl Iterator<Item = WordId> + '_ {
        let bos = self.vocab.id(BOS);
        (0..self.vocab.len() as WordId).filter(move |&id| Some(id) != bos)
    }

    /// ln p(word | context) following the back-off chain. The context is
    /// truncated to the last `order - 1` ids.
    pub fn logprob(&self, context: &[WordId], word: WordId) -> f64 {
        if word as usize >= self.vocab.len() {
            return ARPA_FLOOR_LOG10 * std::f64::consts::LN_10;
        }
        let start = context.len().saturating_sub(self.order - 1);
        let mut ctx = &context[start..];
        let mut acc = 0.0;
        let mut key = Vec::with_capacity(self.order);
        loop {
            key.clear();
            key.extend_from_slice(ctx);
            key.push(word);
            if let Some(e) = self.entry(&key) {
                return acc + e.logprob;
            }
            if ctx.is_empty() {
                // Word missing even from the unigrams: treat as the unknown
                // token, or give it the ARPA floor.
                return match self.vocab.id(UNK) {
                    Some(unk) if unk != word => acc + self.logprob(&[], unk),
                    _ => acc + ARPA_FLOOR_LOG10 * std::f64::consts::LN_10,
                };
            }
            acc += self.backoff(ctx);
            ctx = &ctx[1..];
        }
    }

    /// Maps words to ids, sending out-of-vocabulary words to `<unk>`.
    pub fn ids(&self, words: &[&str]) -> Vec<WordId> {
        let unk = self.vocab.id(UNK);
        words
            .iter()
            .map(|w| self.vocab.id(w).or(unk).unwrap_or(WordId::MAX))
            .collect()
    }

    /// Natural-log probability of a whole sentence, including the end token
    /// when the model uses sentence markers.
    pub fn sentence_logprob(&self, words: &[&str]) -> f64 {
        let mut ids = Vec::with_capacity(words.len() + 2);
        if self.sentence_markers {
            ids.push(self.vocab.id(BOS).expect("begin marker in vocab"));
        }
        let first = ids.len();
        ids.extend(self.ids(words));
        if self.sentence_markers {
            ids.push(self.vocab.id(EOS).expect("end marker in vocab"));
        }
        (first..ids.len()).map(|i| self.logprob(&ids[..i], ids[i])).sum()
    }

    /// Sum of p(w | context) over every predictable word.
    pub fn context_mass(&self, context: &[WordId]) -> f64 {
        self.predictable().map(|w| self.logprob(context, w).exp()).sum()
    }

    /// Every stored context: n-grams carrying a back-off weight.
    pub fn contexts(&self) -> Vec<Vec<WordId>> {
        let mut out = vec![Vec::new()];
        for (k, map) in self.grams.iter().enumerate().take(self.order - 1) {
            out.extend(map.keys().map(|&key| unpack(key, k + 1)));
        }
        out
    }

    /// Checks the structural invariant that each stored n-gram's prefix is
    /// itself stored.
    pub fn check_prefix_closure(&self) -> Result<(), String> {
        for k in 2..=self.order {
            for &key in self.grams[k - 1].keys() {
                let ids = unpack(key, k);
                if self.entry(&ids[..k - 1]).is_none() {
                    return Err(format!("n-gram {:?} has no stored prefix", self.render(&ids)));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn render(&self, ids: &[WordId]) -> String {
        ids.iter().map(|&i| self.vocab.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// Recomputes the back-off weight of `context` so that its conditional
    /// distribution sums to one.
    pub(crate) fn recompute_backoff(&mut self, context: &[WordId]) {
        if context.is_empty() {
            return;
        }
        let mut seen_mass = 0.0;
        let mut lower_mass = 0.0;
        let mut any = false;
        for (w, e) in self.followers(context) {
            any = true;
            seen_mass += e.logprob.exp();
            lower_mass += self.logprob(&context[1..], w).exp();
        }
        let num = 1.0 - seen_mass;
        let den = 1.0 - lower_mass;
        let backoff = if !any {
            None
        } else if den <= 1e-12 || num <= 0.0 {
            // Nothing left to back off to: renormalize the explicit entries.
            let shift = -seen_mass.ln();
            let k = context.len();
            let base = pack(context) << ID_BITS;
            for (_, e) in self.grams[k].range_mut(base..=(base | ((1u128 << ID_BITS) - 1))) {
                e.logprob += shift;
            }
            Some(f64::NEG_INFINITY)
        } else {
            Some((num / den).ln())
        };
        let key = pack(context);
        if let Some(e) = self.grams[context.len() - 1].get_mut(&key) {
            e.backoff = backoff;
        }
    }

    /// Recomputes every back-off weight, lowest order first.
    pub(crate) fn recompute_all_backoffs(&mut self) {
        for k in 1..self.order {
            let keys: Vec<u128> = self.grams[k - 1].keys().copied().collect();
            for key in keys {
                self.recompute_backoff(&unpack(key, k));
            }
        }
    }
}

/// ARPA convention for log10(0).
pub const ARPA_FLOOR_LOG10: f64 = -99.0;
