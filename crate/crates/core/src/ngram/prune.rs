use std::collections::HashMap;

use super::{pack, unpack, NGramModel, WordId, BOS, ID_BITS};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PruneStats {
    pub considered: usize,
    pub removed: usize,
}

impl NGramModel {
    /// Probability of a history under the model itself, chaining conditional
    /// probabilities; a leading `<s>` contributes 1.
    pub(crate) fn history_prob(&self, history: &[WordId]) -> f64 {
        let bos = self.vocab.id(BOS);
        let start = usize::from(!history.is_empty() && Some(history[0]) == bos);
        (start..history.len())
            .map(|i| self.logprob(&history[..i], history[i]))
            .sum::<f64>()
            .exp()
    }

    /// Weighted relative entropy caused by dropping the explicit n-gram
    /// `context + [word]` and re-routing its mass through back-off, with the
    /// context's back-off weight renormalized.
    ///
    /// `seen_mass` and `lower_mass` are the summed explicit and lower-order
    /// probabilities of all stored followers of `context`.
    pub(crate) fn removal_entropy(
        &self,
        context: &[WordId],
        word: WordId,
        history_prob: f64,
        seen_mass: f64,
        lower_mass: f64,
    ) -> f64 {
        let p = self.explicit_logprob(&[context, &[word]].concat()).expect("stored n-gram");
        let p_lower = self.logprob(&context[1..], word);
        let num = 1.0 - seen_mass;
        let den = 1.0 - lower_mass;
        let bow = self.backoff(context);
        let new_bow = ((num + p.exp()) / (den + p_lower.exp())).ln();
        let unseen_term = if num > 0.0 { num * (new_bow - bow) } else { 0.0 };
        -history_prob * (p.exp() * (p_lower + new_bow - p) + unseen_term)
    }
}

/// Relative-entropy pruning: an explicit n-gram of order ≥ 2 is removed when
/// doing so raises per-word perplexity by a relative amount below
/// `threshold`. Removal estimates are taken against the unpruned model;
/// n-grams still needed as the prefix of a surviving longer n-gram are kept.
/// All back-off weights are recomputed afterwards so every conditional
/// distribution stays normalized. Unigrams are never pruned; threshold 0
/// keeps everything.
pub fn prune_ngram(model: &NGramModel, threshold: f64) -> (NGramModel, PruneStats) {
    assert!(threshold >= 0.0, "pruning threshold must be non-negative");
    let mut out = model.clone();
    let mut stats = PruneStats::default();
    if threshold == 0.0 || model.order < 2 {
        return (out, stats);
    }
    let mut history_cache: HashMap<u128, f64> = HashMap::new();
    for k in (2..=model.order).rev() {
        let mut removals = Vec::new();
        let mut keys = model.grams[k - 1].keys().copied().peekable();
        while let Some(&first) = keys.peek() {
            let ctx_key = first >> ID_BITS;
            let context = unpack(ctx_key, k - 1);
            let mut members = Vec::new();
            while let Some(&key) = keys.peek() {
                if key >> ID_BITS != ctx_key {
                    break;
                }
                members.push(key);
                keys.next();
            }
            let (mut seen_mass, mut lower_mass) = (0.0, 0.0);
            for (w, e) in model.followers(&context) {
                seen_mass += e.logprob.exp();
                lower_mass += model.logprob(&context[1..], w).exp();
            }
            let hp = *history_cache
                .entry(ctx_key | ((k as u128) << 124))
                .or_insert_with(|| model.history_prob(&context));
            for key in members {
                // Prefixes of surviving longer n-grams stay.
                if k < model.order && out.followers(&unpack(key, k)).next().is_some() {
                    continue;
                }
                stats.considered += 1;
                let word = (key & ((1u128 << ID_BITS) - 1)) as WordId;
                let delta = model.removal_entropy(&context, word, hp, seen_mass, lower_mass);
                if delta.exp() - 1.0 < threshold {
                    removals.push(key);
                }
            }
        }
        stats.removed += removals.len();
        for key in removals {
            out.grams[k - 1].remove(&key);
        }
    }
    // Contexts that lost every follower no longer carry a back-off weight.
    for k in 1..model.order {
        let keys: Vec<u128> = out.grams[k - 1].keys().copied().collect();
        for key in keys {
            let ids = unpack(key, k);
            if out.followers(&ids).next().is_none() {
                if let Some(e) = out.grams[k - 1].get_mut(&pack(&ids)) {
                    e.backoff = None;
                }
            }
        }
    }
    out.recompute_all_backoffs();
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{train_ngram, NGramTrainer};

    fn corpus() -> Vec<&'static str> {
        vec![
            "play red smoke",
            "play red smoke by the reytons",
            "play dickie jones movies",
            "play the key",
            "put on red smoke",
            "play dickie jones",
            "play jones",
        ]
    }

    #[test]
    fn zero_threshold_is_identity() {
        let m = train_ngram(&corpus(), 3).unwrap();
        let (p, stats) = prune_ngram(&m, 0.0);
        assert_eq!(p, m);
        assert_eq!(stats.removed, 0);
    }

    #[test]
    fn infinite_threshold_leaves_unigrams() {
        let m = train_ngram(&corpus(), 2).unwrap();
        let (p, _) = prune_ngram(&m, f64::INFINITY);
        assert_eq!(p.count(2), 0);
        assert_eq!(p.count(1), m.count(1));
        let m3 = train_ngram(&corpus(), 3).unwrap();
        let (p3, _) = prune_ngram(&m3, f64::INFINITY);
        assert_eq!(p3.count(2) + p3.count(3), 0);
        assert!((p3.context_mass(&[]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pruned_models_stay_normalized_and_closed() {
        let m = train_ngram(&corpus(), 3).unwrap();
        for t in [4f64.powi(-10), 4f64.powi(-6), 4f64.powi(-2), 1.0] {
            let (p, _) = prune_ngram(&m, t);
            p.check_prefix_closure().unwrap();
            for ctx in p.contexts() {
                assert!((p.context_mass(&ctx) - 1.0).abs() < 1e-9, "threshold {t}, ctx {ctx:?}");
            }
        }
    }

    /// The removal estimate equals the exact weighted KL divergence of the
    /// context's conditional distribution, computed by summing over the
    /// whole vocabulary before and after removing that single n-gram.
    #[test]
    fn removal_entropy_matches_explicit_kl() {
        let m = NGramTrainer::new(2).train(corpus()).unwrap();
        let mut checked = 0;
        for ctx in m.contexts().into_iter().filter(|c| c.len() == 1) {
            let followers: Vec<WordId> = m.followers(&ctx).map(|(w, _)| w).collect();
            let (mut seen, mut lower) = (0.0, 0.0);
            for &w in &followers {
                seen += m.explicit_logprob(&[ctx[0], w]).unwrap().exp();
                lower += m.logprob(&[], w).exp();
            }
            let hp = m.history_prob(&ctx);
            for &w in &followers {
                let estimate = m.removal_entropy(&ctx, w, hp, seen, lower);
                let mut reduced = m.clone();
                reduced.grams[1].remove(&pack(&[ctx[0], w]));
                reduced.recompute_backoff(&ctx);
                let kl: f64 = m
                    .predictable()
                    .map(|v| {
                        let p = m.logprob(&ctx, v);
                        p.exp() * (p - reduced.logprob(&ctx, v))
                    })
                    .sum();
                assert!((estimate - hp * kl).abs() < 1e-12, "{estimate} vs {}", hp * kl);
                assert!(estimate >= -1e-15);
                checked += 1;
            }
        }
        assert!(checked > 5);
    }
}
