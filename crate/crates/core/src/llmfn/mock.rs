//! Deterministic offline backends for tests and simulations.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Backend, BackendError, Prediction};
use crate::session::PoolRecord;

/// Prefix of every output the teacher gives for a family it has not been shown.
pub const UNCOVERED_PREFIX: &str = "N/A*";

#[derive(Debug, Clone)]
struct Known {
    family: Option<String>,
    gold: Option<String>,
}

/// Splits a rendered prompt into demo inputs (in prompt order) and the query.
pub fn parse_prompt(prompt: &str) -> (Vec<&str>, Option<&str>) {
    let mut demos = Vec::new();
    let mut query = None;
    for line in prompt.lines() {
        let Some(body) = line.strip_prefix(">> ") else {
            continue;
        };
        if let Some(q) = body.strip_suffix(" =>") {
            query = Some(q);
        } else if let Some((input, _)) = body.rsplit_once(" => ") {
            demos.push(input);
        }
    }
    (demos, query)
}

fn known_map<'a>(records: impl IntoIterator<Item = &'a PoolRecord>) -> HashMap<String, Known> {
    records
        .into_iter()
        .map(|r| {
            (
                r.input.clone(),
                Known {
                    family: r.meta.get("family").cloned(),
                    gold: r.gold_output.clone(),
                },
            )
        })
        .collect()
}

/// FNV-1a over the demo inputs and query, stable across builds.
fn ordering_digest(demos: &[&str], query: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in demos.iter().chain(std::iter::once(&query)) {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Answers correctly exactly when some demonstration in the prompt shares the
/// query's hidden family. Otherwise the answer depends on the demonstration
/// order, so differently ordered prompts disagree.
#[derive(Debug, Clone, Default)]
pub struct MockTeacher {
    known: HashMap<String, Known>,
}

impl MockTeacher {
    pub fn new<'a>(records: impl IntoIterator<Item = &'a PoolRecord>) -> Self {
        MockTeacher {
            known: known_map(records),
        }
    }

    pub fn answer(&self, prompt: &str) -> (String, f64) {
        let (demos, query) = parse_prompt(prompt);
        let q = query.and_then(|q| self.known.get(q));
        let covered = q.and_then(|k| k.family.as_deref()).is_some_and(|fam| {
            demos
                .iter()
                .any(|d| self.known.get(*d).and_then(|k| k.family.as_deref()) == Some(fam))
        });
        match q.and_then(|k| k.gold.as_deref()) {
            Some(gold) if covered => (gold.to_string(), -0.1),
            _ => {
                let digest = ordering_digest(&demos, query.unwrap_or(""));
                let logprob = -1.0 - (digest % 1000) as f64 / 1000.0;
                (format!("{UNCOVERED_PREFIX}{digest:016x}"), logprob)
            }
        }
    }
}

impl Backend for MockTeacher {
    fn id(&self) -> &str {
        "mock-teacher"
    }

    fn complete(&self, prompt: &str) -> Result<Prediction, BackendError> {
        let (out, lp) = self.answer(prompt);
        Ok(Prediction::new(&out, Some(lp), self.id()))
    }
}

/// Returns the gold output of every known query regardless of the prompt.
#[derive(Debug, Clone, Default)]
pub struct PerfectTeacher {
    known: HashMap<String, Known>,
}

impl PerfectTeacher {
    pub fn new<'a>(records: impl IntoIterator<Item = &'a PoolRecord>) -> Self {
        PerfectTeacher {
            known: known_map(records),
        }
    }
}

impl Backend for PerfectTeacher {
    fn id(&self) -> &str {
        "perfect-teacher"
    }

    fn complete(&self, prompt: &str) -> Result<Prediction, BackendError> {
        let (_, query) = parse_prompt(prompt);
        let gold = query
            .and_then(|q| self.known.get(q))
            .and_then(|k| k.gold.clone())
            .unwrap_or_default();
        Ok(Prediction::new(&gold, Some(0.0), self.id()))
    }
}

/// Same output for every prompt.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    output: String,
}

impl ConstantBackend {
    pub fn new(output: impl Into<String>) -> Self {
        ConstantBackend {
            output: output.into(),
        }
    }

    /// An output no gold label uses, so every draft is wrong.
    pub fn always_wrong() -> Self {
        Self::new("??")
    }
}

impl Backend for ConstantBackend {
    fn id(&self) -> &str {
        "constant"
    }

    fn complete(&self, _: &str) -> Result<Prediction, BackendError> {
        Ok(Prediction::new(&self.output, Some(0.0), self.id()))
    }
}

/// Fails every call with a transport error.
#[derive(Debug, Default)]
pub struct UnreachableBackend {
    calls: AtomicUsize,
}

impl UnreachableBackend {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for UnreachableBackend {
    fn id(&self) -> &str {
        "unreachable"
    }

    fn complete(&self, _: &str) -> Result<Prediction, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(BackendError::Transport("connection refused".into()))
    }
}
