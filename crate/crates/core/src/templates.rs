//! Key-phrase templates: token/lemma/POS generalizations of demonstration key
//! phrases, and the weighted set-cover selection that keeps a representative
//! subset of them.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lingo::{AnnotatedText, Pos};
use crate::textdiff::KeyPhrase;

/// Phrases longer than this only produce the three uniform-level templates.
pub const MAX_COMBINATION_TOKENS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("token span {start}..{end} out of range for {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Slot {
    Token(String),
    Lemma(String),
    Pos(Pos),
}

impl Slot {
    pub fn weight(&self) -> f64 {
        match self {
            Slot::Token(_) => 1.0,
            Slot::Lemma(_) => 2.0,
            Slot::Pos(_) => 4.0,
        }
    }

    fn matches(&self, ann: &AnnotatedText, i: usize) -> bool {
        match self {
            Slot::Token(t) => ann.tokens.tokens()[i].text == *t,
            Slot::Lemma(l) => ann.lemmas[i].to_lowercase() == l.to_lowercase(),
            Slot::Pos(p) => ann.pos[i] == *p,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Token(t) => write!(f, "{t}"),
            Slot::Lemma(l) => write!(f, "~{l}"),
            Slot::Pos(p) => write!(f, "{p}"),
        }
    }
}

pub type Pattern = Vec<Slot>;

pub fn pattern_text(slots: &[Slot]) -> String {
    slots
        .iter()
        .map(Slot::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sum of per-slot abstraction weights: Token 1, Lemma 2, Pos 4.
pub fn sparsity(slots: &[Slot]) -> f64 {
    slots.iter().map(Slot::weight).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub slots: Pattern,
    /// Abstraction weight `g`.
    pub sparsity: f64,
    /// Ids of the coverage elements this template matches.
    pub covered: BTreeSet<usize>,
    /// Number of distinct source inputs among the covered elements.
    pub distinct_sources: usize,
}

impl Template {
    /// `g / |t|_x`.
    pub fn weight(&self) -> f64 {
        self.sparsity / self.distinct_sources.max(1) as f64
    }

    pub fn text(&self) -> String {
        pattern_text(&self.slots)
    }
}

/// One (demonstration, key phrase) pair to be covered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageElement {
    pub id: usize,
    pub key_phrase: KeyPhrase,
    pub source_example_id: String,
    /// Annotation of the whole source input; the key phrase indexes into it.
    pub annotation: AnnotatedText,
}

/// Every per-position Token/Lemma/Pos combination of the phrase, or only the
/// three uniform ones when the phrase is longer than four tokens.
pub fn generalize(span: Range<usize>, ann: &AnnotatedText) -> Result<Vec<Pattern>, TemplateError> {
    if span.start > span.end || span.end > ann.len() {
        return Err(TemplateError::SpanOutOfRange {
            start: span.start,
            end: span.end,
            len: ann.len(),
        });
    }
    let options: Vec<[Slot; 3]> = span
        .map(|i| {
            [
                Slot::Token(ann.tokens.tokens()[i].text.clone()),
                Slot::Lemma(ann.lemmas[i].clone()),
                Slot::Pos(ann.pos[i]),
            ]
        })
        .collect();
    if options.is_empty() {
        return Ok(Vec::new());
    }
    if options.len() > MAX_COMBINATION_TOKENS {
        return Ok((0..3)
            .map(|level| options.iter().map(|o| o[level].clone()).collect())
            .collect());
    }
    let total = 3usize.pow(options.len() as u32);
    Ok((0..total)
        .map(|mut code| {
            let mut digits = vec![0; options.len()];
            for d in digits.iter_mut().rev() {
                *d = code % 3;
                code /= 3;
            }
            options
                .iter()
                .zip(digits)
                .map(|(o, d)| o[d].clone())
                .collect()
        })
        .collect())
}

pub fn generalize_key_phrase(
    phrase: &KeyPhrase,
    ann: &AnnotatedText,
) -> Result<Vec<Pattern>, TemplateError> {
    generalize(phrase.token_span.clone(), ann)
}

fn matches_at(slots: &[Slot], ann: &AnnotatedText, start: usize) -> bool {
    start + slots.len() <= ann.len()
        && slots
            .iter()
            .enumerate()
            .all(|(k, slot)| slot.matches(ann, start + k))
}

/// Leftmost non-overlapping matches of the pattern, as token ranges.
pub fn match_template(slots: &[Slot], ann: &AnnotatedText) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    if slots.is_empty() {
        return out;
    }
    let mut i = 0;
    while i + slots.len() <= ann.len() {
        if matches_at(slots, ann, i) {
            out.push(i..i + slots.len());
            i += slots.len();
        } else {
            i += 1;
        }
    }
    out
}

/// Whether the pattern matches the element's key phrase exactly.
fn covers(slots: &[Slot], element: &CoverageElement) -> bool {
    let span = &element.key_phrase.token_span;
    span.len() == slots.len() && matches_at(slots, &element.annotation, span.start)
}

/// Generalizes every element's key phrase and computes each distinct
/// pattern's coverage over all elements.
pub fn induce_templates(elements: &[CoverageElement]) -> Result<Vec<Template>, TemplateError> {
    let mut patterns = BTreeSet::new();
    for el in elements {
        patterns.extend(generalize_key_phrase(&el.key_phrase, &el.annotation)?);
    }
    Ok(patterns
        .into_iter()
        .filter_map(|slots| {
            let hits: Vec<&CoverageElement> =
                elements.iter().filter(|el| covers(&slots, el)).collect();
            if hits.is_empty() {
                return None;
            }
            let sources: BTreeSet<&str> =
                hits.iter().map(|el| el.source_example_id.as_str()).collect();
            Some(Template {
                sparsity: sparsity(&slots),
                covered: hits.iter().map(|el| el.id).collect(),
                distinct_sources: sources.len(),
                slots,
            })
        })
        .collect())
}

/// Classic greedy weighted set cover over the templates' coverage sets.
///
/// Each round picks the template with the lowest weight per newly covered
/// element, ties going to lower `g`, then larger coverage, then the
/// lexicographically smaller pattern text. Stops once nothing new is coverable.
pub fn select_representative(templates: &[Template]) -> Vec<Template> {
    let texts: Vec<String> = templates.iter().map(Template::text).collect();
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    let mut chosen = Vec::new();
    let mut used = vec![false; templates.len()];
    loop {
        let mut best: Option<(usize, usize)> = None;
        for (idx, t) in templates.iter().enumerate() {
            if used[idx] {
                continue;
            }
            let fresh = t.covered.difference(&covered).count();
            if fresh == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, b_fresh)) => {
                    compare_candidates(t, fresh, &texts[idx], &templates[b], b_fresh, &texts[b])
                        == Ordering::Less
                }
            };
            if better {
                best = Some((idx, fresh));
            }
        }
        let Some((idx, _)) = best else { break };
        used[idx] = true;
        covered.extend(templates[idx].covered.iter().copied());
        chosen.push(templates[idx].clone());
    }
    chosen
}

fn compare_candidates(
    a: &Template,
    a_fresh: usize,
    a_text: &str,
    b: &Template,
    b_fresh: usize,
    b_text: &str,
) -> Ordering {
    // w/fresh = g / (|t|_x * fresh), compared by cross-multiplication.
    let a_den = (a.distinct_sources.max(1) * a_fresh) as f64;
    let b_den = (b.distinct_sources.max(1) * b_fresh) as f64;
    (a.sparsity * b_den)
        .total_cmp(&(b.sparsity * a_den))
        .then(a.sparsity.total_cmp(&b.sparsity))
        .then(b.covered.len().cmp(&a.covered.len()))
        .then_with(|| a_text.cmp(b_text))
}
