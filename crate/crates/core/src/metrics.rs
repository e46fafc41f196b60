//! Word error rate, oracle bounds and head/torso/tail reporting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::nbest::NBestList;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("undefined WER: total reference length is 0")]
    UndefinedWer,
    #[error("population `{0}` missing from dataset")]
    MissingPopulation(Population),
    #[error("no selection for utterance `{0}`")]
    MissingSelection(String),
    #[error("selection {index} out of range for utterance `{id}` with {len} hypotheses")]
    SelectionOutOfRange { id: String, index: usize, len: usize },
    #[error("t-test needs at least two paired samples")]
    TooFewSamples,
}

/// Subpopulation of the query distribution by frequency rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Head,
    Torso,
    Tail,
}

impl Population {
    pub const ALL: [Population; 3] = [Population::Head, Population::Torso, Population::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Population::Head => "head",
            Population::Torso => "torso",
            Population::Tail => "tail",
        }
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Edit operations needed to turn a hypothesis into its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub errors: usize,
    pub ref_len: usize,
}

impl std::ops::Add for EditCounts {
    type Output = EditCounts;
    fn add(self, o: EditCounts) -> EditCounts {
        EditCounts {
            errors: self.errors + o.errors,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl std::iter::Sum for EditCounts {
    fn sum<I: Iterator<Item = EditCounts>>(iter: I) -> Self {
        iter.fold(EditCounts::default(), |a, b| a + b)
    }
}

impl EditCounts {
    pub fn wer(self) -> Result<f64, MetricsError> {
        if self.ref_len == 0 {
            return Err(MetricsError::UndefinedWer);
        }
        Ok(self.errors as f64 / self.ref_len as f64)
    }
}

/// Lower-cased single-space tokenization used before every WER comparison.
pub fn wer_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Minimal number of substitutions, insertions and deletions (Levenshtein
/// distance over tokens).
pub fn word_edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    EditCounts {
        errors: prev[m],
        ref_len: reference.len(),
    }
}

/// Case-folded word edit distance between two texts.
pub fn text_edit_distance(reference: &str, hypothesis: &str) -> EditCounts {
    word_edit_distance(&wer_tokens(reference), &wer_tokens(hypothesis))
}

/// Corpus WER: total errors over total reference words. A `None`
/// hypothesis is scored as empty (all deletions).
pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, Option<H>)]) -> Result<f64, MetricsError> {
    pairs
        .iter()
        .map(|(r, h)| text_edit_distance(r.as_ref(), h.as_ref().map(|h| h.as_ref()).unwrap_or("")))
        .sum::<EditCounts>()
        .wer()
}

/// Edit counts of every hypothesis of a list against its reference; an
/// empty list yields the all-deletion count of an empty hypothesis.
pub fn hypothesis_errors(list: &NBestList) -> (Vec<EditCounts>, EditCounts) {
    let reference = wer_tokens(&list.reference);
    let per_hyp = list
        .hypotheses
        .iter()
        .map(|h| word_edit_distance(&reference, &wer_tokens(h.text())))
        .collect();
    let empty = EditCounts {
        errors: reference.len(),
        ref_len: reference.len(),
    };
    (per_hyp, empty)
}

/// Edit counts of one chosen hypothesis (`None` = empty hypothesis).
pub fn selection_errors(list: &NBestList, selection: Option<usize>) -> Result<EditCounts, MetricsError> {
    match selection {
        None => Ok(text_edit_distance(&list.reference, "")),
        Some(i) => {
            let h = list.hypotheses.get(i).ok_or_else(|| MetricsError::SelectionOutOfRange {
                id: list.utterance_id.clone(),
                index: i,
                len: list.len(),
            })?;
            Ok(text_edit_distance(&list.reference, h.text()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Best,
    Worst,
}

/// Index of the oracle hypothesis per utterance. Ties go to the lower rank.
pub fn oracle_selection(list: &NBestList, mode: OracleMode) -> Option<usize> {
    let (per_hyp, _) = hypothesis_errors(list);
    let mut best: Option<(usize, usize)> = None;
    for (i, c) in per_hyp.iter().enumerate() {
        let better = match (best, mode) {
            (None, _) => true,
            (Some((_, e)), OracleMode::Best) => c.errors < e,
            (Some((_, e)), OracleMode::Worst) => c.errors > e,
        };
        if better {
            best = Some((i, c.errors));
        }
    }
    best.map(|(i, _)| i)
}

pub fn oracle_wer(dataset: &[NBestList], mode: OracleMode) -> Result<f64, MetricsError> {
    dataset
        .iter()
        .map(|l| selection_errors(l, oracle_selection(l, mode)))
        .sum::<Result<EditCounts, _>>()?
        .wer()
}

/// Chosen hypothesis index per utterance id (`None` = nothing to choose).
pub type Selections = BTreeMap<String, Option<usize>>;

/// Pairs aligned per-list choices with utterance ids.
pub fn selections_from(lists: &[NBestList], chosen: &[Option<usize>]) -> Selections {
    lists
        .iter()
        .zip(chosen)
        .map(|(l, c)| (l.utterance_id.clone(), *c))
        .collect()
}

/// Rank-1 choice everywhere: the on-device system.
pub fn rank1_selections<'a>(lists: impl IntoIterator<Item = &'a NBestList>) -> Selections {
    lists
        .into_iter()
        .map(|l| (l.utterance_id.clone(), if l.is_empty() { None } else { Some(0) }))
        .collect()
}

pub fn selected_counts(lists: &[NBestList], selections: &Selections) -> Result<Vec<EditCounts>, MetricsError> {
    lists
        .iter()
        .map(|l| {
            let sel = selections
                .get(&l.utterance_id)
                .ok_or_else(|| MetricsError::MissingSelection(l.utterance_id.clone()))?;
            selection_errors(l, *sel)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub wer: f64,
    pub werr_vs_baseline: Option<f64>,
    pub utterance_count: usize,
    pub nonempty_count: usize,
    pub mean_nbest_len: f64,
    pub stddev_nbest_len: f64,
    pub oracle_best_wer: f64,
    pub oracle_worst_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_population: BTreeMap<Population, PopulationStats>,
    /// Unweighted mean of the three population WERs.
    pub average: f64,
    pub average_werr_vs_baseline: Option<f64>,
}

/// Relative WER reduction; 0 when the baseline is already perfect.
pub fn werr(baseline: f64, system: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - system) / baseline
    }
}

pub fn unweighted_average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn build_report(
    populations: &BTreeMap<Population, Vec<NBestList>>,
    selections: &Selections,
    baseline: Option<&Selections>,
) -> Result<EvalReport, MetricsError> {
    let mut per_population = BTreeMap::new();
    let mut base_wers = Vec::new();
    for pop in Population::ALL {
        let lists = populations.get(&pop).ok_or(MetricsError::MissingPopulation(pop))?;
        let wer = selected_counts(lists, selections)?.into_iter().sum::<EditCounts>().wer()?;
        let base_wer = baseline
            .map(|b| selected_counts(lists, b).map(|c| c.into_iter().sum::<EditCounts>().wer()))
            .transpose()?
            .transpose()?;
        if let Some(b) = base_wer {
            base_wers.push(b);
        }
        let lens: Vec<f64> = lists.iter().map(|l| l.len() as f64).collect();
        let (mean_nbest_len, stddev_nbest_len) = mean_std(&lens);
        per_population.insert(
            pop,
            PopulationStats {
                wer,
                werr_vs_baseline: base_wer.map(|b| werr(b, wer)),
                utterance_count: lists.len(),
                nonempty_count: lists.iter().filter(|l| !l.is_empty()).count(),
                mean_nbest_len,
                stddev_nbest_len,
                oracle_best_wer: oracle_wer(lists, OracleMode::Best)?,
                oracle_worst_wer: oracle_wer(lists, OracleMode::Worst)?,
            },
        );
    }
    let wers: Vec<f64> = per_population.values().map(|s| s.wer).collect();
    let average = unweighted_average(&wers);
    let average_werr_vs_baseline = (base_wers.len() == 3).then(|| werr(unweighted_average(&base_wers), average));
    Ok(EvalReport {
        per_population,
        average,
        average_werr_vs_baseline,
    })
}

impl EvalReport {
    /// One table row in the "WER (relative improvement)" layout, WERs in percent.
    pub fn table_row(&self, label: &str) -> String {
        let cell = |wer: f64, werr: Option<f64>| match werr {
            Some(r) => format!("{:.2} ({:.2}%)", wer * 100.0, r * 100.0),
            None => format!("{:.2}", wer * 100.0),
        };
        let mut row = format!("{label:<32}");
        for pop in Population::ALL {
            let s = &self.per_population[&pop];
            row.push_str(&format!(" {:>18}", cell(s.wer, s.werr_vs_baseline)));
        }
        row.push_str(&format!(" {:>18}", cell(self.average, self.average_werr_vs_baseline)));
        row
    }

    pub fn table_header() -> String {
        format!("{:<32} {:>18} {:>18} {:>18} {:>18}", "", "Head", "Torso", "Tail", "Avg.")
    }

    /// Dataset statistics block: utterance counts, N-best length and oracle bounds.
    pub fn statistics_table(&self) -> String {
        let mut out = format!("{:<28} {:>14} {:>14} {:>14}\n", "", "Head", "Torso", "Tail");
        let row = |name: &str, f: &dyn Fn(&PopulationStats) -> String| {
            let mut line = format!("{name:<28}");
            for pop in Population::ALL {
                line.push_str(&format!(" {:>14}", f(&self.per_population[&pop])));
            }
            line.push('\n');
            line
        };
        out += &row("# utterances", &|s| s.utterance_count.to_string());
        out += &row("    (with N >= 1)", &|s| s.nonempty_count.to_string());
        out += &row("N-best length (mu +- sd)", &|s| {
            format!("{:.2} +- {:.2}", s.mean_nbest_len, s.stddev_nbest_len)
        });
        out += &row("Best possible WER", &|s| format!("{:.2}", s.oracle_best_wer * 100.0));
        out += &row("Worst possible WER", &|s| format!("{:.2}", s.oracle_worst_wer * 100.0));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub mean_difference: f64,
}

/// Paired Student's t-test on per-utterance differences `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let dof = n as f64 - 1.0;
    if var == 0.0 {
        let p_value = if mean == 0.0 { 1.0 } else { 0.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(TTest {
            t,
            dof,
            p_value,
            mean_difference: mean,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom");
    // The lower tail keeps precision where 1 - cdf would round to zero.
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        dof,
        p_value,
        mean_difference: mean,
    })
}
