use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{pack, Entry, NGramError, NGramModel, Vocab, ARPA_FLOOR_LOG10, MAX_ORDER, MAX_VOCAB};

const LN_10: f64 = std::f64::consts::LN_10;

fn to_log10(ln: f64) -> f64 {
    if ln == f64::NEG_INFINITY {
        ARPA_FLOOR_LOG10
    } else {
        ln / LN_10
    }
}

fn from_log10(v: f64) -> f64 {
    if v <= ARPA_FLOOR_LOG10 {
        f64::NEG_INFINITY
    } else {
        v * LN_10
    }
}

/// Renders the model in ARPA back-off format. Sections for orders with no
/// entries are written with a zero count and an empty body.
pub fn to_arpa_string(model: &NGramModel) -> String {
    let mut out = String::from("\\data\\\n");
    for k in 1..=model.order {
        writeln!(out, "ngram {k}={}", model.count(k)).unwrap();
    }
    for k in 1..=model.order {
        writeln!(out, "\n\\{k}-grams:").unwrap();
        for (&key, e) in &model.grams[k - 1] {
            let words = model.render(&super::unpack(key, k));
            write!(out, "{:.7}\t{words}", to_log10(e.logprob)).unwrap();
            if k < model.order {
                if let Some(b) = e.backoff {
                    write!(out, "\t{:.7}", to_log10(b)).unwrap();
                }
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn write_arpa(model: &NGramModel, path: impl AsRef<Path>) -> Result<(), NGramError> {
    fs::write(path, to_arpa_string(model))?;
    Ok(())
}

pub fn read_arpa(path: impl AsRef<Path>) -> Result<NGramModel, NGramError> {
    parse_arpa(&fs::read_to_string(path)?)
}

fn parse_err(line: usize, message: impl Into<String>) -> NGramError {
    NGramError::Parse {
        line,
        message: message.into(),
    }
}

enum State {
    Preamble,
    Data,
    Section(usize),
    End,
}

/// Words, log10 probability and optional log10 back-off weight of one line.
type ArpaRow = (Vec<String>, f64, Option<f64>);

/// Parses ARPA text. Models read this way always use sentence markers.
pub fn parse_arpa(text: &str) -> Result<NGramModel, NGramError> {
    let mut state = State::Preamble;
    let mut declared: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<ArpaRow>> = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = raw.trim();
        match state {
            State::Preamble => {
                if line == "\\data\\" {
                    state = State::Data;
                }
            }
            State::Data => {
                if line.is_empty() {
                    continue;
                }
                if let Some(rest) = line.strip_prefix("ngram ") {
                    let (k, n) = rest
                        .split_once('=')
                        .ok_or_else(|| parse_err(lineno, format!("bad count line `{line}`")))?;
                    let k: usize = k.trim().parse().map_err(|_| parse_err(lineno, "bad order"))?;
                    let n: usize = n.trim().parse().map_err(|_| parse_err(lineno, "bad count"))?;
                    if k != declared.len() + 1 || k > MAX_ORDER {
                        return Err(parse_err(lineno, format!("unexpected order {k}")));
                    }
                    declared.push(n);
                    rows.push(Vec::new());
                } else {
                    state = section_header(line, lineno, &declared)?;
                }
            }
            State::Section(k) => {
                if line.is_empty() {
                    continue;
                }
                if line.starts_with('\\') {
                    if rows[k - 1].len() != declared[k - 1] {
                        return Err(parse_err(
                            lineno,
                            format!("{k}-grams: declared {} entries, found {}", declared[k - 1], rows[k - 1].len()),
                        ));
                    }
                    state = if line == "\\end\\" {
                        State::End
                    } else {
                        section_header(line, lineno, &declared)?
                    };
                    continue;
                }
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != k + 1 && fields.len() != k + 2 {
                    return Err(parse_err(lineno, format!("expected {k} words in `{line}`")));
                }
                let prob: f64 = fields[0]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad probability `{}`", fields[0])))?;
                let bow = match fields.get(k + 1) {
                    Some(b) => Some(b.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad back-off `{b}`")))?),
                    None => None,
                };
                let words = fields[1..=k].iter().map(|s| s.to_string()).collect();
                rows[k - 1].push((words, prob, bow));
            }
            State::End => {}
        }
    }
    match state {
        State::End => {}
        State::Preamble => return Err(parse_err(last_line, "missing \\data\\ header")),
        _ => return Err(parse_err(last_line, "missing \\end\\ marker")),
    }
    if declared.is_empty() {
        return Err(parse_err(last_line, "no ngram counts declared"));
    }

    let mut vocab = Vocab::with_specials();
    for (words, _, _) in &rows[0] {
        vocab.insert(&words[0]);
    }
    if vocab.len() > MAX_VOCAB {
        return Err(NGramError::VocabTooLarge);
    }
    let order = declared.len();
    let mut model = NGramModel::empty(order, vocab, true);
    for (k, section) in rows.into_iter().enumerate() {
        for (words, prob, bow) in section {
            let ids: Option<Vec<_>> = words.iter().map(|w| model.vocab.id(w)).collect();
            let ids = ids.ok_or_else(|| {
                parse_err(0, format!("{}-gram `{}` uses a word missing from the unigrams", k + 1, words.join(" ")))
            })?;
            model.grams[k].insert(
                pack(&ids),
                Entry {
                    logprob: from_log10(prob),
                    backoff: bow.map(from_log10),
                },
            );
        }
    }
    Ok(model)
}

fn section_header(line: &str, lineno: usize, declared: &[usize]) -> Result<State, NGramError> {
    let k = line
        .strip_prefix('\\')
        .and_then(|s| s.strip_suffix("-grams:"))
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| parse_err(lineno, format!("malformed section header `{line}`")))?;
    if k == 0 || k > declared.len() {
        return Err(parse_err(lineno, format!("section {k}-grams has no declared count")));
    }
    Ok(State::Section(k))
}
