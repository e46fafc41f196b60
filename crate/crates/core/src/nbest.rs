//! N-best lists, per-hypothesis feature matrices and fusion weights, plus
//! the JSON-lines N-best file format.
//!
//! Every score in this crate is a *cost*: lower is better. On-device signals
//! arrive as costs, and server-side language model features are negative
//! natural-log likelihoods, so one convention holds everywhere.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the on-device acoustic column. Always the first feature column.
pub const ACOUSTIC: &str = "acoustic";
/// Name of the on-device language model column. Always the second feature column.
pub const ONDEVICE_LM: &str = "ondevice_lm";

#[derive(Debug, Error)]
pub enum NBestError {
    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate utterance id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("feature matrix: {0}")]
    Features(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Collapses runs of whitespace and trims, so that texts compare word-wise.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One recognition hypothesis with its on-device decoding costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHypothesis", into = "RawHypothesis")]
pub struct Hypothesis {
    text: String,
    acoustic_cost: f64,
    lm_cost: f64,
}

#[derive(Serialize, Deserialize)]
struct RawHypothesis {
    text: String,
    ac: f64,
    lm: f64,
}

impl TryFrom<RawHypothesis> for Hypothesis {
    type Error = NBestError;

    fn try_from(raw: RawHypothesis) -> Result<Self, Self::Error> {
        Hypothesis::new(raw.text, raw.ac, raw.lm)
    }
}

impl From<Hypothesis> for RawHypothesis {
    fn from(h: Hypothesis) -> Self {
        RawHypothesis {
            text: h.text,
            ac: h.acoustic_cost,
            lm: h.lm_cost,
        }
    }
}

impl Hypothesis {
    pub fn new(text: impl Into<String>, acoustic_cost: f64, lm_cost: f64) -> Result<Self, NBestError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(NBestError::InvalidHypothesis("empty text".into()));
        }
        if normalize_text(&text) != text {
            return Err(NBestError::InvalidHypothesis(format!(
                "text `{text}` has leading, trailing or repeated whitespace"
            )));
        }
        if !acoustic_cost.is_finite() || !lm_cost.is_finite() {
            return Err(NBestError::InvalidHypothesis(format!(
                "non-finite cost for `{text}`"
            )));
        }
        Ok(Self {
            text,
            acoustic_cost,
            lm_cost,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn acoustic_cost(&self) -> f64 {
        self.acoustic_cost
    }

    pub fn lm_cost(&self) -> f64 {
        self.lm_cost
    }

    /// Sum of the two on-device costs, which defines the on-device ranking.
    pub fn ondevice_cost(&self) -> f64 {
        self.acoustic_cost + self.lm_cost
    }
}

/// One utterance: the reference transcription and the ranked hypotheses
/// produced on device. Lists with zero hypotheses are legal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    #[serde(rename = "id")]
    pub utterance_id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "hyps")]
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn new(utterance_id: impl Into<String>, reference: impl Into<String>, hypotheses: Vec<Hypothesis>) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            reference: reference.into(),
            hypotheses,
        }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Per-hypothesis feature values for one utterance. Row `i` belongs to
/// hypothesis `i` of the matching [`NBestList`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    /// Matrix holding only the two on-device columns.
    pub fn ondevice(list: &NBestList) -> Self {
        Self {
            utterance_id: list.utterance_id.clone(),
            columns: vec![ACOUSTIC.to_string(), ONDEVICE_LM.to_string()],
            values: list
                .hypotheses
                .iter()
                .map(|h| vec![h.acoustic_cost(), h.lm_cost()])
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Appends a column; `column.len()` must equal the row count.
    pub fn push_column(&mut self, name: impl Into<String>, column: &[f64]) -> Result<(), NBestError> {
        let name = name.into();
        if column.len() != self.values.len() {
            return Err(NBestError::Features(format!(
                "column `{name}` has {} values for {} rows",
                column.len(),
                self.values.len()
            )));
        }
        if self.columns.contains(&name) {
            return Err(NBestError::Features(format!("duplicate column `{name}`")));
        }
        self.columns.push(name);
        for (row, v) in self.values.iter_mut().zip(column) {
            row.push(*v);
        }
        Ok(())
    }

    pub fn validate(&self, list: &NBestList) -> Result<(), NBestError> {
        if self.columns.len() < 2 || self.columns[0] != ACOUSTIC || self.columns[1] != ONDEVICE_LM {
            return Err(NBestError::Features(format!(
                "{}: first columns must be `{ACOUSTIC}`, `{ONDEVICE_LM}`",
                self.utterance_id
            )));
        }
        if self.utterance_id != list.utterance_id || self.values.len() != list.len() {
            return Err(NBestError::Features(format!(
                "{}: matrix does not align with n-best list {}",
                self.utterance_id, list.utterance_id
            )));
        }
        for row in &self.values {
            if row.len() != self.columns.len() {
                return Err(NBestError::Features(format!("{}: ragged row", self.utterance_id)));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(NBestError::Features(format!("{}: non-finite value", self.utterance_id)));
            }
        }
        Ok(())
    }
}

/// Linear interpolation weights, one per feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
}

impl FusionWeights {
    /// On-device baseline: acoustic and on-device LM at 1, every server-side feature at 0.
    pub fn baseline(columns: &[String]) -> Self {
        let weights = columns
            .iter()
            .map(|c| if c == ACOUSTIC || c == ONDEVICE_LM { 1.0 } else { 0.0 })
            .collect();
        Self {
            names: columns.to_vec(),
            weights,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.weights[i])
    }
}

/// Reads one N-best list per line. Blank lines are skipped.
pub fn read_nbest_jsonl(path: impl AsRef<Path>) -> Result<Vec<NBestList>, NBestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut lists = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let list: NBestList = serde_json::from_str(&line).map_err(|e| NBestError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(list.utterance_id.clone()) {
            return Err(NBestError::DuplicateId {
                id: list.utterance_id,
                line: lineno,
            });
        }
        lists.push(list);
    }
    Ok(lists)
}

/// Writes one N-best list per line (UTF-8, LF). Costs use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_nbest_jsonl(lists: &[NBestList], path: impl AsRef<Path>) -> Result<(), NBestError> {
    let mut w = BufWriter::new(File::create(path)?);
    for list in lists {
        serde_json::to_writer(&mut w, list).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::dickie_jones;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hypothesis_rejects_bad_text_and_costs() {
        assert!(Hypothesis::new("", 0.0, 0.0).is_err());
        assert!(Hypothesis::new("   ", 0.0, 0.0).is_err());
        assert!(Hypothesis::new(" play", 0.0, 0.0).is_err());
        assert!(Hypothesis::new("play  it", 0.0, 0.0).is_err());
        assert!(Hypothesis::new("play", f64::NAN, 0.0).is_err());
        assert!(Hypothesis::new("play", 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn reads_table_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"u1","ref":"play dickie jones movies","hyps":[{"text":"Play the Key Jones movies","ac":208,"lm":50},{"text":"Play Ricky Jones movies","ac":286,"lm":48},{"text":"Play Dickie Jones movies","ac":638,"lm":20}]}"#,
        )
        .unwrap();
        let lists = read_nbest_jsonl(&path).unwrap();
        assert_eq!(lists.len(), 1);
        assert_eq!(lists[0].len(), 3);
        assert_eq!(lists[0].hypotheses[0].text(), "Play the Key Jones movies");
        assert_eq!(lists[0].hypotheses[2].acoustic_cost(), 638.0);
    }

    #[test]
    fn empty_file_and_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_nbest_jsonl(&path).unwrap().is_empty());

        std::fs::write(&path, "{\"id\":\"x\",\"ref\":\"a b\",\"hyps\":[]}\n").unwrap();
        let lists = read_nbest_jsonl(&path).unwrap();
        assert_eq!(lists[0].len(), 0);

        write_nbest_jsonl(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"ref\":\"x\",\"hyps\":[]}\n{\"id\":\"b\",\"ref\":\"x\",\"hyps\":[{\"text\":\"\",\"ac\":1,\"lm\":1}]}\n",
        )
        .unwrap();
        match read_nbest_jsonl(&path) {
            Err(NBestError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "{\"id\":\"a\",\"ref\":\"x\",\"hyps\":[]}\nnot json\n").unwrap();
        assert!(matches!(read_nbest_jsonl(&path), Err(NBestError::Malformed { line: 2, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"ref\":\"x\",\"hyps\":[]}\n{\"id\":\"a\",\"ref\":\"y\",\"hyps\":[]}\n",
        )
        .unwrap();
        assert!(matches!(
            read_nbest_jsonl(&path),
            Err(NBestError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn table_example_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let lists = vec![dickie_jones()];
        write_nbest_jsonl(&lists, &path).unwrap();
        assert_eq!(read_nbest_jsonl(&path).unwrap(), lists);
    }

    #[test]
    fn feature_matrix_columns() {
        let list = dickie_jones();
        let mut fm = FeatureMatrix::ondevice(&list);
        fm.validate(&list).unwrap();
        fm.push_column("words", &[5.0, 4.0, 4.0]).unwrap();
        assert_eq!(fm.column_index("words"), Some(2));
        assert!(fm.push_column("short", &[1.0]).is_err());
        assert!(fm.push_column("words", &[1.0, 1.0, 1.0]).is_err());
        let w = FusionWeights::baseline(&fm.columns);
        assert_eq!(w.weights, vec![1.0, 1.0, 0.0]);
    }

    fn arb_word() -> impl Strategy<Value = String> {
        "[a-z]{1,6}"
    }

    fn arb_hypothesis() -> impl Strategy<Value = Hypothesis> {
        (
            prop::collection::vec(arb_word(), 1..5),
            -1e6f64..1e6,
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
        )
            .prop_map(|(words, ac, lm)| Hypothesis::new(words.join(" "), ac, lm).unwrap())
    }

    fn arb_list() -> impl Strategy<Value = Vec<NBestList>> {
        prop::collection::vec(
            (prop::collection::vec(arb_word(), 0..5), prop::collection::vec(arb_hypothesis(), 0..6)),
            0..8,
        )
        .prop_map(|items| {
            items
                .into_iter()
                .enumerate()
                .map(|(i, (r, hyps))| NBestList::new(format!("u{i}"), r.join(" "), hyps))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn jsonl_round_trip_is_lossless_and_stable(lists in arb_list()) {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.jsonl");
            let b = dir.path().join("b.jsonl");
            write_nbest_jsonl(&lists, &a).unwrap();
            let back = read_nbest_jsonl(&a).unwrap();
            prop_assert_eq!(&back, &lists);
            write_nbest_jsonl(&back, &b).unwrap();
            prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }

    #[test]
    fn thousand_random_lists_serialize_byte_identically() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let words = ["play", "the", "key", "jones", "movies", "ricky", "dickie"];
        let lists: Vec<NBestList> = (0..1000)
            .map(|i| {
                let n = rng.random_range(0..5);
                let hyps = (0..n)
                    .map(|_| {
                        let len = rng.random_range(1..6);
                        let text: Vec<&str> = (0..len).map(|_| words[rng.random_range(0..words.len())]).collect();
                        Hypothesis::new(text.join(" "), rng.random::<f64>() * 1000.0, rng.random::<f64>() * 100.0 - 50.0)
                            .unwrap()
                    })
                    .collect();
                NBestList::new(format!("utt{i}"), "play dickie jones movies", hyps)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_nbest_jsonl(&lists, &a).unwrap();
        let back = read_nbest_jsonl(&a).unwrap();
        assert_eq!(back, lists);
        write_nbest_jsonl(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
