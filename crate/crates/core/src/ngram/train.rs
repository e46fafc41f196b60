use std::collections::{BTreeSet, HashMap};

use super::{pack, Entry, NGramError, NGramModel, Vocab, WordId, BOS, EOS, MAX_ORDER, MAX_VOCAB};

/// Witten-Bell back-off estimator.
///
/// For a context `h` seen `c(h)` times with `T(h)` distinct continuations,
/// an observed word gets `c(h, w) / (c(h) + T(h))`. The reserved mass
/// `T(h) / (c(h) + T(h))` goes to unseen words through the back-off weight of
/// `h`. At the unigram level the reserved mass is shared uniformly by the
/// vocabulary words never seen in training (always including `<unk>`).
#[derive(Debug, Clone)]
pub struct NGramTrainer {
    order: usize,
    sentence_markers: bool,
}

impl NGramTrainer {
    pub fn new(order: usize) -> Self {
        Self {
            order,
            sentence_markers: true,
        }
    }

    /// Disables the implicit `<s>` context and the `</s>` token; each line
    /// is then a bare token stream.
    pub fn sentence_markers(mut self, on: bool) -> Self {
        self.sentence_markers = on;
        self
    }

    /// Trains on `(sentence, occurrence count)` pairs.
    pub fn train_weighted<'a, I>(&self, corpus: I) -> Result<NGramModel, NGramError>
    where
        I: IntoIterator<Item = (&'a str, u64)>,
    {
        if !(1..=MAX_ORDER).contains(&self.order) {
            return Err(NGramError::BadOrder(self.order));
        }
        let corpus: Vec<(Vec<&str>, u64)> = corpus
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| (s.split_whitespace().collect(), n))
            .collect();
        if corpus.is_empty() {
            return Err(NGramError::EmptyCorpus);
        }

        let mut vocab = Vocab::with_specials();
        let words: BTreeSet<&str> = corpus.iter().flat_map(|(s, _)| s.iter().copied()).collect();
        for w in words {
            vocab.insert(w);
        }
        if vocab.len() > MAX_VOCAB {
            return Err(NGramError::VocabTooLarge);
        }
        let bos = vocab.id(BOS).unwrap();
        let eos = vocab.id(EOS).unwrap();

        let mut counts: Vec<HashMap<u128, u64>> = vec![HashMap::new(); self.order];
        let mut ids: Vec<WordId> = Vec::new();
        for (sentence, n) in &corpus {
            ids.clear();
            if self.sentence_markers {
                ids.push(bos);
            }
            let first = ids.len();
            ids.extend(sentence.iter().map(|w| vocab.id(w).unwrap()));
            if self.sentence_markers {
                ids.push(eos);
            }
            for i in first..ids.len() {
                for k in 1..=self.order.min(i + 1) {
                    *counts[k - 1].entry(pack(&ids[i + 1 - k..=i])).or_insert(0) += n;
                }
            }
        }

        let mut model = NGramModel::empty(self.order, vocab, self.sentence_markers);
        self.estimate_unigrams(&mut model, &counts[0]);
        for k in 2..=self.order {
            // Context totals c(h) and type counts T(h).
            let mut ctx: HashMap<u128, (u64, u64)> = HashMap::new();
            for (&key, &c) in &counts[k - 1] {
                let e = ctx.entry(key >> super::ID_BITS).or_insert((0, 0));
                e.0 += c;
                e.1 += 1;
            }
            let map = &mut model.grams[k - 1];
            for (&key, &c) in &counts[k - 1] {
                let (total, types) = ctx[&(key >> super::ID_BITS)];
                let p = c as f64 / (total + types) as f64;
                map.insert(
                    key,
                    Entry {
                        logprob: p.ln(),
                        backoff: None,
                    },
                );
            }
        }
        model.recompute_all_backoffs();
        Ok(model)
    }

    pub fn train<'a, I>(&self, sentences: I) -> Result<NGramModel, NGramError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        self.train_weighted(sentences.into_iter().map(|s| (s, 1)))
    }

    fn estimate_unigrams(&self, model: &mut NGramModel, counts: &HashMap<u128, u64>) {
        let bos = model.vocab.id(BOS).unwrap();
        let total: u64 = counts.values().sum();
        let types = counts.len() as u64;
        let predictable: Vec<WordId> = model.predictable().collect();
        let unseen = predictable.iter().filter(|&&w| !counts.contains_key(&(w as u128))).count();
        let denom = if unseen == 0 { total } else { total + types } as f64;
        let unseen_p = if unseen == 0 {
            0.0
        } else {
            types as f64 / (total + types) as f64 / unseen as f64
        };
        let map = &mut model.grams[0];
        for w in predictable {
            let p = match counts.get(&(w as u128)) {
                Some(&c) => c as f64 / denom,
                None => unseen_p,
            };
            map.insert(
                w as u128,
                Entry {
                    logprob: p.ln(),
                    backoff: None,
                },
            );
        }
        if self.sentence_markers {
            map.insert(
                bos as u128,
                Entry {
                    logprob: f64::NEG_INFINITY,
                    backoff: None,
                },
            );
        }
    }
}

/// Trains a Witten-Bell back-off model with sentence markers.
pub fn train_ngram<S: AsRef<str>>(corpus: &[S], order: usize) -> Result<NGramModel, NGramError> {
    NGramTrainer::new(order).train(corpus.iter().map(AsRef::as_ref))
}
