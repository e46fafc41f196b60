use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatagenError;

/// Entity slot marker inside templates.
pub const SLOT: &str = "{entity}";

/// Weighted carrier templates with one entity slot each, and a weighted
/// entity list. The joint prior of a query is `P(template) · P(entity)`.
///
/// File format (tab-separated name and weight, `#` comments allowed):
///
/// ```text
/// [templates]
/// play {entity}<TAB>0.6
/// [entities]
/// red smoke<TAB>0.1
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGrammar {
    templates: Vec<(String, f64)>,
    entities: Vec<(String, f64)>,
}

fn check_items(items: &[(String, f64)], what: &'static str, is_template: bool) -> Result<(), DatagenError> {
    if items.is_empty() {
        return Err(DatagenError::EmptyGrammar(what));
    }
    for (i, (s, w)) in items.iter().enumerate() {
        let bad = |message: String| DatagenError::Grammar { line: i + 1, message };
        if !(w.is_finite() && *w > 0.0) {
            return Err(bad(format!("{what} `{s}` has non-positive prior {w}")));
        }
        if s.split_whitespace().collect::<Vec<_>>().join(" ") != *s || s.is_empty() {
            return Err(bad(format!("{what} `{s}` is empty or has irregular whitespace")));
        }
        let slots = s.matches(SLOT).count();
        if is_template && slots != 1 {
            return Err(bad(format!("template `{s}` has {slots} slots, expected 1")));
        }
        if !is_template && slots != 0 {
            return Err(bad(format!("entity `{s}` contains a slot marker")));
        }
    }
    Ok(())
}

fn normalized(items: &[(String, f64)]) -> Vec<f64> {
    let z: f64 = items.iter().map(|(_, w)| w).sum();
    items.iter().map(|(_, w)| w / z).collect()
}

fn top_k(items: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    sorted.truncate(k.max(1));
    let z: f64 = sorted.iter().map(|(_, w)| w).sum();
    sorted.into_iter().map(|(s, w)| (s, w / z)).collect()
}

impl QueryGrammar {
    pub fn new(templates: Vec<(String, f64)>, entities: Vec<(String, f64)>) -> Result<Self, DatagenError> {
        check_items(&templates, "templates", true)?;
        check_items(&entities, "entities", false)?;
        Ok(Self { templates, entities })
    }

    pub fn parse(text: &str) -> Result<Self, DatagenError> {
        let mut templates = Vec::new();
        let mut entities = Vec::new();
        let mut section: Option<bool> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let err = |message: String| DatagenError::Grammar { line: i + 1, message };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.trim() {
                "[templates]" => {
                    section = Some(true);
                    continue;
                }
                "[entities]" => {
                    section = Some(false);
                    continue;
                }
                s if s.starts_with('[') => return Err(err(format!("unknown section `{s}`"))),
                _ => {}
            }
            let is_template = section.ok_or_else(|| err("entry before any section header".into()))?;
            let (s, w) = line
                .rsplit_once('\t')
                .ok_or_else(|| err("expected `string<TAB>weight`".into()))?;
            let w: f64 = w.trim().parse().map_err(|_| err(format!("bad weight `{w}`")))?;
            let entry = (s.to_string(), w);
            let list = if is_template { &mut templates } else { &mut entities };
            check_items(std::slice::from_ref(&entry), if is_template { "templates" } else { "entities" }, is_template)
                .map_err(|e| match e {
                    DatagenError::Grammar { message, .. } => err(message),
                    other => other,
                })?;
            list.push(entry);
        }
        Self::new(templates, entities)
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("[templates]\n");
        for (s, w) in &self.templates {
            writeln!(out, "{s}\t{w}").unwrap();
        }
        out.push_str("[entities]\n");
        for (s, w) in &self.entities {
            writeln!(out, "{s}\t{w}").unwrap();
        }
        out
    }

    pub fn templates(&self) -> &[(String, f64)] {
        &self.templates
    }

    pub fn entities(&self) -> &[(String, f64)] {
        &self.entities
    }

    pub fn template_probs(&self) -> Vec<f64> {
        normalized(&self.templates)
    }

    pub fn entity_probs(&self) -> Vec<f64> {
        normalized(&self.entities)
    }

    /// Query text of template `t` filled with entity `e`.
    pub fn query(&self, t: usize, e: usize) -> String {
        self.templates[t].0.replacen(SLOT, &self.entities[e].0, 1)
    }

    /// Every `(template, entity text)` split of `query`, in template order.
    /// The entity text need not be in the entity list.
    pub fn decompositions<'a, 'q: 'a>(&'a self, query: &'q str) -> impl Iterator<Item = (usize, &'q str)> + 'a {
        self.templates.iter().enumerate().filter_map(move |(t, (tpl, _))| {
            let (pre, post) = tpl.split_once(SLOT)?;
            let rest = query.strip_prefix(pre)?.strip_suffix(post)?;
            (!rest.is_empty()).then_some((t, rest))
        })
    }
}

/// Keeps the `top_templates` and `top_entities` highest-prior items (ties
/// broken by string) and renormalizes. Cutoffs above the list length keep
/// everything.
pub fn apply_cutoffs(grammar: &QueryGrammar, top_templates: usize, top_entities: usize) -> QueryGrammar {
    QueryGrammar {
        templates: top_k(&grammar.templates, top_templates),
        entities: top_k(&grammar.entities, top_entities),
    }
}

impl QueryGrammar {
    /// Parses [`super::BUNDLED_GRAMMAR`].
    pub fn bundled() -> Self {
        Self::parse(super::BUNDLED_GRAMMAR).expect("bundled grammar is valid")
    }
}
