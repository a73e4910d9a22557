//! Task metrics: temporal extraction/normalization P/R/F1, ROUGE-L F and BLEU-4.

use std::collections::HashMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::TaskKind;
use crate::textdiff::{tokenize, NA};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction ids do not match gold ids (first mismatch: {0})")]
    IdMismatch(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("gold output for {id} is neither a mention nor N/A: {text:?}")]
    MalformedGold { id: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TemporalParse {
    Mention { span: String, value: String },
    NA,
    Malformed,
}

/// Parses `span == YYYY-MM-DD`, splitting on the last separator.
pub fn parse_temporal(output: &str) -> TemporalParse {
    let text = output.trim();
    if text == NA {
        return TemporalParse::NA;
    }
    let Some((span, value)) = text.rsplit_once(" == ") else {
        return TemporalParse::Malformed;
    };
    let (span, value) = (span.trim(), value.trim());
    let shaped = value.len() == 10
        && value.bytes().enumerate().all(|(i, b)| match i {
            4 | 7 => b == b'-',
            _ => b.is_ascii_digit(),
        });
    if span.is_empty() || !shaped || NaiveDate::parse_from_str(value, "%Y-%m-%d").is_err() {
        return TemporalParse::Malformed;
    }
    TemporalParse::Mention {
        span: span.to_string(),
        value: value.to_string(),
    }
}

fn normalize_span(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    /// Empty denominators count as perfect; F1 is 0 whenever nothing matched
    /// unless there was nothing to find and nothing was predicted.
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, gold);
        let f1 = if predicted == 0 && gold == 0 {
            1.0
        } else if true_positives == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalScores {
    pub extraction: Prf,
    pub normalization: Prf,
}

/// Per-example verdicts: (extraction hit, normalization hit).
fn temporal_match(pred: &TemporalParse, gold: &TemporalParse) -> (bool, bool) {
    match (pred, gold) {
        (
            TemporalParse::Mention { span: ps, value: pv },
            TemporalParse::Mention { span: gs, value: gv },
        ) => {
            let ext = normalize_span(ps) == normalize_span(gs);
            (ext, ext && pv == gv)
        }
        _ => (false, false),
    }
}

fn align<'a>(
    predictions: &'a [(String, String)],
    golds: &'a [(String, String)],
) -> Result<Vec<(&'a str, &'a str, &'a str)>, MetricsError> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for (id, text) in predictions {
        if by_id.insert(id, text).is_some() {
            return Err(MetricsError::DuplicateId(id.clone()));
        }
    }
    if predictions.len() != golds.len() {
        let missing = golds
            .iter()
            .find(|(id, _)| !by_id.contains_key(id.as_str()))
            .or_else(|| predictions.first())
            .map(|(id, _)| id.clone())
            .unwrap_or_default();
        return Err(MetricsError::IdMismatch(missing));
    }
    golds
        .iter()
        .map(|(id, gold)| {
            by_id
                .get(id.as_str())
                .map(|pred| (id.as_str(), *pred, gold.as_str()))
                .ok_or_else(|| MetricsError::IdMismatch(id.clone()))
        })
        .collect()
}

/// Mention-level scores over `(id, output)` pairs matched by id.
pub fn temporal_scores(
    predictions: &[(String, String)],
    golds: &[(String, String)],
) -> Result<TemporalScores, MetricsError> {
    let (mut ext_tp, mut norm_tp, mut predicted, mut gold_n) = (0, 0, 0, 0);
    for (id, pred, gold) in align(predictions, golds)? {
        let g = parse_temporal(gold);
        if g == TemporalParse::Malformed {
            return Err(MetricsError::MalformedGold {
                id: id.to_string(),
                text: gold.to_string(),
            });
        }
        let p = parse_temporal(pred);
        predicted += usize::from(p != TemporalParse::NA);
        gold_n += usize::from(g != TemporalParse::NA);
        let (e, n) = temporal_match(&p, &g);
        ext_tp += usize::from(e);
        norm_tp += usize::from(n);
    }
    Ok(TemporalScores {
        extraction: Prf::from_counts(ext_tp, predicted, gold_n),
        normalization: Prf::from_counts(norm_tp, predicted, gold_n),
    })
}

fn words(text: &str) -> Vec<String> {
    tokenize(text).texts().into_iter().map(str::to_string).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F1.
pub fn rouge_l_f(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Sentence BLEU-4: clipped n-gram precisions, add-one smoothing of zero
/// counts for orders 2 to 4, brevity penalty for short candidates.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(&c, n);
        let refs = ngram_counts(&r, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * log_sum.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_match: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization_match: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
}

/// Scores `(id, prediction, gold)` triples for the given task kind. Text
/// metrics are averaged over examples.
pub fn evaluate(task: TaskKind, items: &[(String, String, String)]) -> Result<EvalReport, MetricsError> {
    let preds: Vec<(String, String)> = items.iter().map(|(i, p, _)| (i.clone(), p.clone())).collect();
    let golds: Vec<(String, String)> = items.iter().map(|(i, _, g)| (i.clone(), g.clone())).collect();
    let mut rows = Vec::with_capacity(items.len());
    let mut aggregate = Aggregate {
        examples: items.len(),
        temporal: None,
        rouge_l: None,
        bleu4: None,
    };
    match task {
        TaskKind::Temporal => {
            aggregate.temporal = Some(temporal_scores(&preds, &golds)?);
            for (id, pred, gold) in items {
                let (e, n) = temporal_match(&parse_temporal(pred), &parse_temporal(gold));
                rows.push(EvalRow {
                    id: id.clone(),
                    prediction: pred.clone(),
                    gold: gold.clone(),
                    extraction_match: Some(e),
                    normalization_match: Some(n),
                    rouge_l: None,
                    bleu4: None,
                });
            }
        }
        TaskKind::Generic => {
            align(&preds, &golds)?;
            for (id, pred, gold) in items {
                rows.push(EvalRow {
                    id: id.clone(),
                    prediction: pred.clone(),
                    gold: gold.clone(),
                    extraction_match: None,
                    normalization_match: None,
                    rouge_l: Some(rouge_l_f(pred, gold)),
                    bleu4: Some(bleu4(pred, gold)),
                });
            }
            let mean = |f: fn(&EvalRow) -> Option<f64>| {
                (!rows.is_empty())
                    .then(|| rows.iter().filter_map(f).sum::<f64>() / rows.len() as f64)
            };
            aggregate.rouge_l = mean(|r| r.rouge_l);
            aggregate.bleu4 = mean(|r| r.bleu4);
        }
    }
    Ok(EvalReport {
        task,
        rows,
        aggregate,
    })
}
