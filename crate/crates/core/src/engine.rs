//! One curation iteration over a session: templates from the current
//! demonstrations, key phrases and slices over the pool, slice statistics,
//! candidate sampling and drafting. Shared by the service and the simulator.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lingo::{AnnotatedText, Annotator, Embedder, Embedding, Lingo, LingoError};
use crate::llmfn::{
    build_prompt, cross_validate_demo, infer, predict_candidate, Backend, CandidateOutcome,
    LlmError, PromptSpec, RetryPolicy,
};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::session::{
    PoolRecord, PseudoLabel, ServedBatch, ServedCandidate, SessionError, SessionEvent, SessionState,
};
use crate::slicing::{
    assign_key_phrases, cluster, sample_batch, slice_stats, slice_table, Slice, SliceError,
    SliceStats,
};
use crate::templates::{induce_templates, select_representative, CoverageElement, Pattern, Template, TemplateError};
use crate::textdiff::{extract_key_phrases, KeyPhrase};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Lingo(#[from] LingoError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("a batch is already open: {0}")]
    BatchOpen(String),
}

impl EngineError {
    /// No example left to show.
    pub fn is_exhausted(&self) -> bool {
        matches!(self, EngineError::Slice(SliceError::EmptyPool))
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, EngineError::Llm(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Slice-ranked sampling with pseudo-label filtering once the gate opens.
    Slice,
    /// Uniform sampling from the eligible pool, drafts only.
    Random,
}

/// Memoized annotations, embeddings, clusterings and leave-one-out verdicts.
/// Everything cached is a pure function of its key.
#[derive(Default)]
pub struct EngineCache {
    annotations: Mutex<HashMap<String, AnnotatedText>>,
    embeddings: Mutex<HashMap<String, Embedding>>,
    clustering: Mutex<Option<(ClusterKey, Vec<Slice>)>>,
    loo: Mutex<HashMap<String, bool>>,
}

#[derive(Debug, Clone, PartialEq)]
struct ClusterKey {
    patterns: Vec<Pattern>,
    pool: Vec<String>,
    clusters: usize,
    min_size: usize,
}

struct CachedAnnotator<'a> {
    inner: &'a dyn Annotator,
    cache: &'a Mutex<HashMap<String, AnnotatedText>>,
}

impl Annotator for CachedAnnotator<'_> {
    fn annotate(&self, text: &str) -> Result<AnnotatedText, LingoError> {
        if let Some(a) = self.cache.lock().unwrap().get(text) {
            return Ok(a.clone());
        }
        let a = self.inner.annotate(text)?;
        self.cache.lock().unwrap().insert(text.to_string(), a.clone());
        Ok(a)
    }
}

struct CachedEmbedder<'a> {
    inner: &'a dyn Embedder,
    cache: &'a Mutex<HashMap<String, Embedding>>,
}

impl Embedder for CachedEmbedder<'_> {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, LingoError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_batch(&missing)?;
            let mut cache = self.cache.lock().unwrap();
            for (t, e) in missing.into_iter().zip(fresh) {
                cache.insert(t.to_string(), e);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

/// Everything derived from a state snapshot before sampling.
#[derive(Debug, Clone)]
pub struct IterationPlan {
    pub templates: Vec<Template>,
    pub key_phrases: IndexMap<String, Vec<KeyPhrase>>,
    pub slices: Vec<Slice>,
    pub stats: Vec<SliceStats>,
    /// Correctness verdicts: labeled pool examples plus held-out demo checks.
    pub verdicts: HashMap<String, bool>,
}

impl IterationPlan {
    /// Whether every slice has been sampled and reaches `threshold` accuracy.
    pub fn all_slices_accurate(&self, threshold: f64) -> bool {
        !self.stats.is_empty()
            && self
                .stats
                .iter()
                .all(|s| s.m > 0 && s.k as f64 / s.m as f64 >= threshold)
    }
}

pub struct Engine {
    pub lingo: Lingo,
    pub backend: Arc<dyn Backend>,
    pub policy: RetryPolicy,
    pub cache: EngineCache,
}

impl Engine {
    pub fn new(lingo: Lingo, backend: Arc<dyn Backend>, policy: RetryPolicy) -> Self {
        Engine {
            lingo,
            backend,
            policy,
            cache: EngineCache::default(),
        }
    }

    fn annotator(&self) -> CachedAnnotator<'_> {
        CachedAnnotator {
            inner: self.lingo.annotator.as_ref(),
            cache: &self.cache.annotations,
        }
    }

    /// Representative templates learned from the demonstrations' key phrases.
    pub fn templates(&self, state: &SessionState) -> Result<Vec<Template>, EngineError> {
        let annotator = self.annotator();
        let mut elements = Vec::new();
        for demo in &state.demonstrations.demos {
            let annotation = annotator.annotate(&demo.input)?;
            for kp in extract_key_phrases(&demo.input, &demo.output) {
                elements.push(CoverageElement {
                    id: elements.len(),
                    key_phrase: kp,
                    source_example_id: demo.example_id.clone(),
                    annotation: annotation.clone(),
                });
            }
        }
        Ok(select_representative(&induce_templates(&elements)?))
    }

    /// Leave-one-out verdict for every demonstration, keyed by example id.
    pub fn demo_verdicts(&self, state: &SessionState) -> Result<HashMap<String, bool>, EngineError> {
        let demos = &state.demonstrations.demos;
        if demos.len() < 2 {
            return Ok(HashMap::new());
        }
        let spec = PromptSpec::from_state(state, "");
        let results: Vec<Result<(String, bool), EngineError>> = (0..demos.len())
            .into_par_iter()
            .map(|i| {
                let key = format!("{}\u{0}{i}", build_prompt(&spec, &spec.identity()));
                if let Some(&v) = self.cache.loo.lock().unwrap().get(&key) {
                    return Ok((demos[i].example_id.clone(), v));
                }
                let v = cross_validate_demo(&spec, self.backend.as_ref(), i, &self.policy)?;
                self.cache.loo.lock().unwrap().insert(key, v);
                Ok((demos[i].example_id.clone(), v))
            })
            .collect();
        results.into_iter().collect()
    }

    /// Templates, key phrases, slices and statistics for the current state.
    pub fn plan(&self, state: &SessionState) -> Result<IterationPlan, EngineError> {
        let templates = self.templates(state)?;
        let key_phrases = assign_key_phrases(
            state.pool.values().map(|e| (e.id.as_str(), e.input.as_str())),
            &templates,
            &self.annotator(),
        )?;
        let key = ClusterKey {
            patterns: templates.iter().map(|t| t.slots.clone()).collect(),
            pool: state.pool.keys().cloned().collect(),
            clusters: state.config.clusters,
            min_size: state.config.min_slice_size,
        };
        let cached = {
            let guard = self.cache.clustering.lock().unwrap();
            guard
                .as_ref()
                .filter(|(k, _)| *k == key)
                .map(|(_, s)| s.clone())
        };
        let slices = match cached {
            Some(s) => s,
            None => {
                let embedder = CachedEmbedder {
                    inner: self.lingo.embedder.as_ref(),
                    cache: &self.cache.embeddings,
                };
                let s = cluster(
                    &key_phrases,
                    &embedder,
                    state.config.clusters,
                    state.config.min_slice_size,
                )?;
                *self.cache.clustering.lock().unwrap() = Some((key, s.clone()));
                s
            }
        };
        let mut verdicts = state.verdicts();
        verdicts.extend(self.demo_verdicts(state)?);
        let stats = slices.iter().map(|s| slice_stats(s, &verdicts)).collect();
        Ok(IterationPlan {
            templates,
            key_phrases,
            slices,
            stats,
            verdicts,
        })
    }

    /// Runs one iteration and records the served batch in the state. Nothing
    /// is recorded when any backend call fails.
    pub fn next_batch(
        &self,
        state: &mut SessionState,
        sampler: SamplerKind,
        plan: Option<&IterationPlan>,
    ) -> Result<ServedBatch, EngineError> {
        let size = state.config.batch_size;
        self.next_batch_sized(state, sampler, plan, size)
    }

    /// [`Engine::next_batch`] with at most `batch_size` surfaced candidates.
    pub fn next_batch_sized(
        &self,
        state: &mut SessionState,
        sampler: SamplerKind,
        plan: Option<&IterationPlan>,
        batch_size: usize,
    ) -> Result<ServedBatch, EngineError> {
        if let Some(open) = &state.open_batch {
            return Err(EngineError::BatchOpen(open.batch_id.clone()));
        }
        let mut rng = iteration_rng(state.rng_seed, state.batches_served);
        let batch = match sampler {
            SamplerKind::Random => self.random_batch(state, batch_size, &mut rng)?,
            SamplerKind::Slice => {
                let owned;
                let plan = match plan {
                    Some(p) => p,
                    None => {
                        owned = self.plan(state)?;
                        &owned
                    }
                };
                self.slice_batch(state, plan, batch_size, &mut rng)?
            }
        };
        state.apply(SessionEvent::BatchServed(batch.clone()))?;
        Ok(batch)
    }

    fn batch_id(state: &SessionState) -> String {
        format!("b{}", state.batches_served + 1)
    }

    fn random_batch(
        &self,
        state: &SessionState,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ServedBatch, EngineError> {
        let eligible: Vec<&str> = state
            .pool
            .values()
            .filter(|e| e.is_eligible())
            .map(|e| e.id.as_str())
            .collect();
        if eligible.is_empty() {
            return Err(SliceError::EmptyPool.into());
        }
        let picks: Vec<&str> = eligible
            .choose_multiple(rng, batch_size)
            .copied()
            .collect();
        let candidates = picks
            .par_iter()
            .map(|id| {
                let spec = PromptSpec::from_state(state, state.pool[*id].input.clone());
                let p = infer(self.backend.as_ref(), &build_prompt(&spec, &spec.identity()), &self.policy)?;
                Ok(ServedCandidate {
                    example_id: id.to_string(),
                    slice_id: None,
                    draft_output: p.output,
                    total_logprob: p.total_logprob,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(ServedBatch {
            batch_id: Self::batch_id(state),
            iteration: state.iteration,
            candidates,
            pseudo_labeled: Vec::new(),
            slice_table: Vec::new(),
        })
    }

    fn slice_batch(
        &self,
        state: &SessionState,
        plan: &IterationPlan,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ServedBatch, EngineError> {
        let draws = if state.gate_open {
            state.config.max_filter_attempts.max(batch_size)
        } else {
            batch_size
        };
        let order = sample_batch(
            &plan.slices,
            &plan.stats,
            state.iteration,
            draws,
            |id| state.pool.get(id).is_some_and(|e| e.is_eligible()),
            rng,
        )?;
        // Each draw gets its own generator so chunked parallel drafting stays
        // deterministic.
        let seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();
        let mut candidates = Vec::new();
        let mut pseudo_labeled = Vec::new();
        let mut next = 0;
        while candidates.len() < batch_size && next < order.len() {
            let take = (batch_size - candidates.len()).min(order.len() - next);
            let outcomes = (next..next + take)
                .into_par_iter()
                .map(|i| {
                    let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
                    predict_candidate(state, self.backend.as_ref(), &order[i].example_id, &mut r, &self.policy)
                })
                .collect::<Result<Vec<_>, LlmError>>()?;
            for (c, outcome) in order[next..next + take].iter().zip(outcomes) {
                match outcome {
                    CandidateOutcome::Surfaced(p) => candidates.push(ServedCandidate {
                        example_id: c.example_id.clone(),
                        slice_id: Some(c.slice_id.clone()),
                        draft_output: p.output,
                        total_logprob: p.total_logprob,
                    }),
                    CandidateOutcome::PseudoLabeled(output) => pseudo_labeled.push(PseudoLabel {
                        example_id: c.example_id.clone(),
                        slice_id: Some(c.slice_id.clone()),
                        output,
                    }),
                }
            }
            next += take;
        }
        Ok(ServedBatch {
            batch_id: Self::batch_id(state),
            iteration: state.iteration,
            candidates,
            pseudo_labeled,
            slice_table: slice_table(&plan.slices, &plan.stats, state.iteration),
        })
    }
}

/// Runs the current function over labeled test records with the stored
/// demonstration order and scores the outputs.
pub fn evaluate_test_set(
    engine: &Engine,
    state: &SessionState,
    test: &[PoolRecord],
) -> Result<EvalReport, EngineError> {
    let items = test
        .par_iter()
        .map(|r| {
            let spec = PromptSpec::from_state(state, r.input.clone());
            let p = infer(engine.backend.as_ref(), &build_prompt(&spec, &spec.identity()), &engine.policy)?;
            Ok((r.id.clone(), p.output, r.gold_output.clone().unwrap_or_default()))
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    Ok(evaluate(state.config.task, &items)?)
}

/// Per-batch generator derived from the session seed.
pub fn iteration_rng(seed: u64, batches_served: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(batches_served));
    rng
}
