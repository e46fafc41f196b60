//! Byte-pair-encoding sub-word tokenizer with a word-boundary prefix marker.
//!
//! Training learns merges over the word-frequency table of a corpus; encoding
//! segments each `▁`-prefixed word by greedy longest match against the
//! learned units. Text is lower-cased before training and encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Word-boundary marker prefixed to every word.
pub const MARKER: char = '\u{2581}';
/// What an unknown unit decodes to.
pub const UNKNOWN_SURFACE: &str = "\u{2047}";

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const SPECIALS: [&str; 3] = ["<s>", "</s>", "<unk>"];
const HEADER: &str = "#subword-bpe v1";

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("vocab size {requested} must exceed the base inventory of {base} units")]
    VocabTooSmall { requested: usize, base: usize },
    #[error("corpus supports at most {max} units, {requested} requested")]
    CorpusExhausted { requested: usize, max: usize },
    #[error("model file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubwordModel {
    units: Vec<String>,
    index: HashMap<String, u32>,
    /// Specials plus the marker and every training character.
    base_size: usize,
    longest_unit: usize,
}

/// Result of encoding one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// Set when some character was outside the training inventory.
    pub lossy: bool,
}

impl SubwordModel {
    fn from_units(units: Vec<String>, base_size: usize) -> Self {
        let index = units.iter().enumerate().map(|(i, u)| (u.clone(), i as u32)).collect();
        let longest_unit = units.iter().map(|u| u.chars().count()).max().unwrap_or(1);
        Self {
            units,
            index,
            base_size,
            longest_unit,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.units.len()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    /// Learned units in merge order (excludes specials and base characters).
    pub fn merged_units(&self) -> &[String] {
        &self.units[self.base_size..]
    }

    pub fn encode(&self, text: &str) -> Encoding {
        let mut ids = Vec::new();
        let mut lossy = false;
        for word in text.split_whitespace() {
            let chars: Vec<char> = std::iter::once(MARKER).chain(word.to_lowercase().chars()).collect();
            let mut pos = 0;
            while pos < chars.len() {
                let max = self.longest_unit.min(chars.len() - pos);
                let found = (1..=max).rev().find_map(|len| {
                    let piece: String = chars[pos..pos + len].iter().collect();
                    self.index.get(&piece).map(|&id| (id, len))
                });
                match found {
                    Some((id, len)) => {
                        ids.push(id);
                        pos += len;
                    }
                    None => {
                        ids.push(UNK_ID);
                        lossy = true;
                        pos += 1;
                    }
                }
            }
        }
        Encoding { ids, lossy }
    }

    /// Inverse of [`encode`](Self::encode); sentence markers are dropped and
    /// unknown ids render as `⁇`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                BOS_ID | EOS_ID => {}
                UNK_ID => s.push_str(UNKNOWN_SURFACE),
                _ => match self.unit(id) {
                    Some(u) => s.push_str(u),
                    None => s.push_str(UNKNOWN_SURFACE),
                },
            }
        }
        s.replace(MARKER, " ").trim_start().to_string()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\tbase={}\n", self.base_size);
        for (i, u) in self.units.iter().enumerate() {
            writeln!(out, "{i}\t{u}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let err = |line: usize, message: String| SubwordError::Parse { line, message };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let base_size = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().strip_prefix("base="))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| err(1, format!("bad header `{header}`")))?;
        let mut units = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let (rank, unit) = line
                .split_once('\t')
                .ok_or_else(|| err(lineno, "expected `rank<TAB>unit`".into()))?;
            if rank.parse::<usize>().ok() != Some(units.len()) {
                return Err(err(lineno, format!("rank `{rank}` out of sequence")));
            }
            units.push(unit.to_string());
        }
        if units.len() < base_size || units.iter().take(3).ne(SPECIALS.iter()) {
            return Err(err(1, "missing special units".into()));
        }
        Ok(Self::from_units(units, base_size))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SubwordError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SubwordError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Learns BPE merges until the vocabulary (specials, base characters and
/// merged units) reaches `vocab_size`. Ties between equally frequent pairs go
/// to the lexicographically smallest `(left, right)`.
pub fn train_subword<'a, I>(corpus: I, vocab_size: usize) -> Result<SubwordModel, SubwordError>
where
    I: IntoIterator<Item = (&'a str, u64)>,
{
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for (line, n) in corpus {
        for w in line.split_whitespace() {
            *word_freq.entry(w.to_lowercase()).or_insert(0) += n;
        }
    }
    let chars: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    let mut units: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    units.push(MARKER.to_string());
    units.extend(chars.iter().filter(|&&c| c != MARKER).map(|c| c.to_string()));
    let base_size = units.len();
    if vocab_size <= base_size {
        return Err(SubwordError::VocabTooSmall {
            requested: vocab_size,
            base: base_size,
        });
    }
    let mut known: BTreeSet<String> = units.iter().cloned().collect();

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, n)| {
            let symbols = std::iter::once(MARKER).chain(w.chars()).map(|c| c.to_string()).collect();
            (symbols, n)
        })
        .collect();

    while units.len() < vocab_size {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, n) in &words {
            for pair in symbols.windows(2) {
                *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += n;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else {
            return Err(SubwordError::CorpusExhausted {
                requested: vocab_size,
                max: units.len(),
            });
        };
        let merged = format!("{left}{right}");
        for (symbols, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        if known.insert(merged.clone()) {
            units.push(merged);
        }
    }
    Ok(SubwordModel::from_units(units, base_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn train(lines: &[&str], size: usize) -> SubwordModel {
        train_subword(lines.iter().map(|l| (*l, 1)), size).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // Base inventory: 3 specials, marker, 'a', 'b'.
        let m = train(&["aaab aaab"], 6 + 2);
        assert_eq!(m.base_size(), 6);
        // (a,a) occurs 4 times; (▁,a) and (a,b) twice.
        assert_eq!(m.merged_units()[0], "aa");
        assert_eq!(m.vocab_size(), 8);
    }

    #[test]
    fn vocab_must_exceed_inventory() {
        let err = train_subword([("aaab aaab", 1)], 6).unwrap_err();
        assert!(matches!(err, SubwordError::VocabTooSmall { requested: 6, base: 6 }));
    }

    #[test]
    fn exhausted_corpus_is_an_error() {
        assert!(matches!(
            train_subword([("ab", 1)], 50),
            Err(SubwordError::CorpusExhausted { .. })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["play red smoke", "play dickie jones movies", "put on red smoke by the reytons"];
        assert_eq!(train(&corpus, 40), train(&corpus, 40));
    }

    #[test]
    fn round_trips_and_flags_unknowns() {
        let m = train(&["play red smoke by the reytons", "play dickie jones"], 30);
        let e = m.encode("play red smoke");
        assert!(!e.lossy);
        assert_eq!(m.decode(&e.ids), "play red smoke");
        assert_eq!(m.encode(""), Encoding { ids: vec![], lossy: false });
        assert_eq!(m.decode(&[]), "");
        let q = m.encode("play zz");
        assert!(q.lossy);
        assert_eq!(m.decode(&q.ids), "play \u{2047}\u{2047}");
    }

    #[test]
    fn text_format_round_trips() {
        let m = train(&["play red smoke", "play dickie jones movies"], 25);
        let back = SubwordModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(SubwordModel::from_text("nonsense\n").is_err());
        let mut broken = m.to_text();
        broken.push_str("99\tzz\n");
        assert!(matches!(SubwordModel::from_text(&broken), Err(SubwordError::Parse { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_and_length_bound(words in prop::collection::vec("[a-f]{1,7}", 1..6)) {
            let m = train(&["abc def fed cab bad face", "dead beef cafe fade"], 24);
            let text = words.join(" ");
            let e = m.encode(&text);
            prop_assert!(!e.lossy);
            prop_assert_eq!(m.decode(&e.ids), text.clone());
            prop_assert!(e.ids.len() <= text.chars().filter(|c| *c != ' ').count() + words.len());
            prop_assert!(e.ids.iter().all(|&id| (id as usize) < m.vocab_size()));
        }
    }
}
