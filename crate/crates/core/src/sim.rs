//! Oracle-driven simulation: an oracle labeler corrects every wrong draft, and
//! runs end on the demonstration cap, the presentation budget, a streak of
//! all-correct batches, or every slice looking accurate. Also the synthetic
//! pool generator and the paired slice-vs-random comparison.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{evaluate_test_set, Engine, EngineError, SamplerKind};
use crate::lingo::Lingo;
use crate::llmfn::{Backend, RetryPolicy};
use crate::metrics::Aggregate;
use crate::session::{
    round_correct_fraction, Action, Demo, FeedbackEvent, PoolRecord, SessionConfig, SessionError,
    SessionEvent, SessionState, TaskKind,
};
use crate::textdiff::NA;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("invalid pool spec: {0}")]
    InvalidSpec(String),
    #[error("pool example {0} has no gold output")]
    MissingGold(String),
    #[error("pool and test set share input {0:?}")]
    Overlap(String),
    #[error("need at least {need} seeds, got {got}")]
    TooFewSeeds { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    UsDate,
    LongDate,
    Relative,
    Holiday,
    Negative,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::UsDate,
        Family::LongDate,
        Family::Relative,
        Family::Holiday,
        Family::Negative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::UsDate => "us_date",
            Family::LongDate => "long_date",
            Family::Relative => "relative",
            Family::Holiday => "holiday",
            Family::Negative => "negative",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub families: Vec<(Family, f64)>,
    pub pool_size: usize,
    pub test_size: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            families: vec![
                (Family::UsDate, 0.50),
                (Family::LongDate, 0.25),
                (Family::Relative, 0.15),
                (Family::Holiday, 0.05),
                (Family::Negative, 0.05),
            ],
            pool_size: 600,
            test_size: 100,
        }
    }
}

impl PoolSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.families.is_empty() {
            return Err(SimError::InvalidSpec("no families".into()));
        }
        let mut seen = HashSet::new();
        for &(f, p) in &self.families {
            if !seen.insert(f) {
                return Err(SimError::InvalidSpec(format!("family {f} listed twice")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(SimError::InvalidSpec(format!("bad frequency {p} for {f}")));
            }
        }
        let total: f64 = self.families.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimError::InvalidSpec(format!("frequencies sum to {total}")));
        }
        Ok(())
    }
}

const NAMES: &[&str] = &[
    "Maria", "Tom", "Priya", "Kenji", "Alex", "Fatima", "Lucas", "Olga", "Sam", "Nadia", "Omar",
    "Grace", "Ivan", "Chloe", "Diego", "Hana",
];
const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];
const US_FRAMES: &[&str] = &[
    "The invoice from {name} is due {d}.",
    "Shipment {n} left the warehouse on {d}.",
    "Form {n} was filed by {name} on {d}.",
    "{name} renewed the lease on {d}.",
    "Order #{n} arrived {d}.",
    "Payment {n} cleared on {d}.",
];
const LONG_FRAMES: &[&str] = &[
    "{name} was born on {d} in a small town.",
    "The treaty was signed on {d} after long talks.",
    "On {d}, the museum opened its new wing.",
    "{name} moved to the coast on {d}.",
    "The bridge collapsed on {d}, officials said.",
    "Our band played its first show on {d}.",
];
const RELATIVE_FRAMES: &[&str] = &[
    "Took a photo with {name} {r}.",
    "Can't believe {name} finally called {r}!",
    "Feeling great after the gym {r}.",
    "{name} and I are grabbing coffee {r}.",
    "So much traffic on the way home {r}.",
    "Finished reading that novel {r}.",
];
const HOLIDAYS: &[(&str, u32, u32)] = &[
    ("Christmas", 12, 25),
    ("Halloween", 10, 31),
    ("Valentine's Day", 2, 14),
    ("New Year's Eve", 12, 31),
    ("Independence Day", 7, 4),
];
const HOLIDAY_FRAMES: &[&str] = &[
    "Merry {h}, {name}!",
    "Happy {h} to everyone!",
    "{name} is hosting a {h} party.",
    "Decorating the house for {h} with {name}.",
    "Best {h} ever, thanks {name}!",
    "Who is ready for {h}?",
];
const NEGATIVE_FRAMES: &[&str] = &[
    "Why does the printer jam every time {name} uses it?",
    "{name} thinks pineapple belongs on pizza.",
    "The wifi is down again, ugh.",
    "Anyone know a good plumber? Asking for {name}.",
    "{name} lost the remote control somewhere.",
    "This coffee tastes like burnt toast.",
    "Cats are better than dogs, says {name}.",
];

fn random_date<R: Rng + ?Sized>(rng: &mut R) -> NaiveDate {
    let base = NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date");
    base + Duration::days(rng.random_range(0..365 * 30))
}

fn fill(frame: &str, name: &str, n: u32, slot: &str, value: &str) -> String {
    frame
        .replace("{name}", name)
        .replace("{n}", &n.to_string())
        .replace(slot, value)
}

/// One example of a family: (input, gold output, anchor date when relevant).
fn generate_one<R: Rng + ?Sized>(family: Family, rng: &mut R) -> (String, String, Option<NaiveDate>) {
    let name = *NAMES.choose(rng).unwrap();
    let n = rng.random_range(100..1000);
    match family {
        Family::UsDate => {
            let d = random_date(rng);
            let span = d.format("%m/%d/%Y").to_string();
            let frame = US_FRAMES.choose(rng).unwrap();
            (fill(frame, name, n, "{d}", &span), format!("{span} == {d}"), None)
        }
        Family::LongDate => {
            let d = random_date(rng);
            let span = format!("{} {}, {}", MONTHS[d.month0() as usize], d.day(), d.year());
            let frame = LONG_FRAMES.choose(rng).unwrap();
            (fill(frame, name, n, "{d}", &span), format!("{span} == {d}"), None)
        }
        Family::Relative => {
            let anchor = random_date(rng);
            let (word, shift) = *[("today", 0), ("yesterday", -1), ("tomorrow", 1)].choose(rng).unwrap();
            let frame = RELATIVE_FRAMES.choose(rng).unwrap();
            let value = anchor + Duration::days(shift);
            (fill(frame, name, n, "{r}", word), format!("{word} == {value}"), Some(anchor))
        }
        Family::Holiday => {
            let anchor = random_date(rng);
            let &(h, month, day) = HOLIDAYS.choose(rng).unwrap();
            let value = NaiveDate::from_ymd_opt(anchor.year(), month, day).expect("fixed-date holiday");
            let frame = HOLIDAY_FRAMES.choose(rng).unwrap();
            (fill(frame, name, n, "{h}", h), format!("{h} == {value}"), Some(anchor))
        }
        Family::Negative => {
            let frame = NEGATIVE_FRAMES.choose(rng).unwrap();
            (fill(frame, name, n, "", ""), NA.to_string(), None)
        }
    }
}

/// Deterministic labeled pool and disjoint test set. Every record carries its
/// family in `meta["family"]`.
pub fn generate_synthetic_pool(spec: &PoolSpec, seed: u64) -> Result<(Vec<PoolRecord>, Vec<PoolRecord>), SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.pool_size + spec.test_size;
    let mut seen: HashSet<String> = HashSet::new();
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut family = spec.families.last().unwrap().0;
        for &(f, p) in &spec.families {
            acc += p;
            if u < acc {
                family = f;
                break;
            }
        }
        let mut attempt = 0;
        let (input, gold, anchor) = loop {
            let item = generate_one(family, &mut rng);
            if seen.insert(item.0.clone()) {
                break item;
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(SimError::InvalidSpec(format!(
                    "cannot generate enough distinct {family} inputs"
                )));
            }
        };
        let mut meta = BTreeMap::from([("family".to_string(), family.name().to_string())]);
        if let Some(a) = anchor {
            meta.insert("anchor".to_string(), a.to_string());
        }
        records.push(PoolRecord {
            id: format!("x{i:04}"),
            input,
            gold_output: Some(gold),
            meta,
        });
    }
    let test = records.split_off(spec.pool_size);
    Ok((records, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StopReason {
    DemoCap,
    PresentedCap,
    ConsecutiveCorrect,
    SliceAccuracy,
    PoolExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub sampler: SamplerKind,
    pub seed: u64,
    pub seed_demo_count: usize,
    pub session: SessionConfig,
    /// Evaluate on the test set when snapshotting the trajectory.
    pub evaluate: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sampler: SamplerKind::Slice,
            seed: 0,
            seed_demo_count: 3,
            session: SessionConfig::default(),
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub demo_count: usize,
    pub presented: usize,
    pub families_covered: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub sampler: SamplerKind,
    pub seed: u64,
    pub stop_reason: StopReason,
    pub final_demos: Vec<Demo>,
    /// Demonstrations the oracle asked for, counting a request refused by the cap.
    pub demos_requested: usize,
    pub presented_count: usize,
    pub pseudo_labeled: usize,
    pub batches: usize,
    /// Examples presented when every pool family first had a demonstration.
    pub presented_to_coverage: Option<usize>,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl SimResult {
    /// Presented-to-coverage, or the presentation budget when never reached.
    pub fn coverage_cost(&self, budget: usize) -> usize {
        self.presented_to_coverage.unwrap_or(budget)
    }

    pub fn final_metrics(&self) -> Option<&Aggregate> {
        self.trajectory.last().and_then(|p| p.metrics.as_ref())
    }
}

/// Headline score of an aggregate: normalization F1 for temporal tasks,
/// ROUGE-L otherwise.
pub fn headline(a: &Aggregate) -> Option<f64> {
    a.temporal.map(|t| t.normalization.f1).or(a.rouge_l)
}

fn families_of(state: &SessionState) -> BTreeSet<&str> {
    state
        .demonstrations
        .demos
        .iter()
        .filter_map(|d| state.pool.get(&d.example_id).and_then(|e| e.family()))
        .collect()
}

/// The seed demonstrations: the same random pool examples for every sampler.
pub fn seed_demo_ids(pool: &[PoolRecord], seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d3d0);
    let mut ids: Vec<&PoolRecord> = pool.iter().collect();
    ids.shuffle(&mut rng);
    ids.into_iter().take(count).map(|r| r.id.clone()).collect()
}

fn now_ms() -> u64 {
    0
}

fn feedback(state: &SessionState, id: &str, action: Action, edited: Option<String>) -> SessionEvent {
    SessionEvent::Feedback(FeedbackEvent {
        iteration: state.iteration,
        example_id: id.to_string(),
        action,
        edited_output: edited,
        timestamp: now_ms(),
    })
}

pub fn run_simulation(
    config: &SimConfig,
    backend: Arc<dyn Backend>,
    pool: &[PoolRecord],
    test: &[PoolRecord],
) -> Result<SimResult, SimError> {
    if let Some(r) = pool.iter().find(|r| r.gold_output.is_none()) {
        return Err(SimError::MissingGold(r.id.clone()));
    }
    let inputs: HashSet<&str> = pool.iter().map(|r| r.input.as_str()).collect();
    if let Some(r) = test.iter().find(|r| inputs.contains(r.input.as_str())) {
        return Err(SimError::Overlap(r.input.clone()));
    }
    let cfg = &config.session;
    let engine = Engine::new(Lingo::default(), backend, RetryPolicy::immediate());
    let mut state = SessionState::new("Extract the date mention and normalize it.", cfg.clone(), config.seed);
    state.apply(SessionEvent::PoolAppended {
        records: pool.to_vec(),
    })?;
    let all_families: BTreeSet<String> = pool
        .iter()
        .filter_map(|r| r.meta.get("family").cloned())
        .collect();

    for id in seed_demo_ids(pool, config.seed, config.seed_demo_count) {
        let gold = state.pool[&id].gold_output.clone().unwrap();
        let ev = if gold.trim() == NA {
            feedback(&state, &id, Action::AddedNegative, None)
        } else {
            feedback(&state, &id, Action::AddedPositive, Some(gold))
        };
        state.apply(ev)?;
    }

    let mut trajectory = Vec::new();
    let snapshot = |state: &SessionState, trajectory: &mut Vec<TrajectoryPoint>| -> Result<(), SimError> {
        let metrics = if config.evaluate && !test.is_empty() {
            Some(evaluate_test_set(&engine, state, test)?.aggregate)
        } else {
            None
        };
        trajectory.push(TrajectoryPoint {
            demo_count: state.demonstrations.len(),
            presented: state.presented_count(),
            families_covered: families_of(state).len(),
            metrics,
        });
        Ok(())
    };

    let covered = |state: &SessionState| {
        let have = families_of(state);
        all_families.iter().all(|f| have.contains(f.as_str()))
    };
    let mut presented_to_coverage = covered(&state).then_some(0);
    let mut demos_requested = state.demonstrations.len();
    let mut added_since_snapshot = 0;
    let mut streak = 0;
    let mut batches = 0;
    let mut pseudo = 0;

    let stop_reason = loop {
        let plan = if config.sampler == SamplerKind::Slice {
            let plan = engine.plan(&state)?;
            if state.batches_served > 0 && plan.all_slices_accurate(cfg.slice_accuracy_stop) {
                break StopReason::SliceAccuracy;
            }
            Some(plan)
        } else {
            None
        };
        let presented_before = state.presented_count();
        let budget = cfg.max_presented.saturating_sub(presented_before);
        let batch = match engine.next_batch_sized(&mut state, config.sampler, plan.as_ref(), cfg.batch_size.min(budget)) {
            Ok(b) => b,
            Err(e) if e.is_exhausted() => break StopReason::PoolExhausted,
            Err(e) => return Err(e.into()),
        };
        batches += 1;
        pseudo += batch.pseudo_labeled.len();

        let mut hit_cap = false;
        for (idx, c) in batch.candidates.iter().enumerate() {
            let gold = state.pool[&c.example_id].gold_output.clone().unwrap();
            if c.draft_output == gold {
                state.apply(feedback(&state, &c.example_id, Action::NoChange, None))?;
                continue;
            }
            if state.demonstrations.len() >= cfg.max_demos {
                demos_requested = state.demonstrations.len() + 1;
                hit_cap = true;
                break;
            }
            state.apply(feedback(&state, &c.example_id, Action::EditedOutput, Some(gold.clone())))?;
            let add = if gold.trim() == NA {
                feedback(&state, &c.example_id, Action::AddedNegative, None)
            } else {
                feedback(&state, &c.example_id, Action::AddedPositive, Some(gold))
            };
            state.apply(add)?;
            demos_requested = state.demonstrations.len();
            added_since_snapshot += 1;
            if presented_to_coverage.is_none() && covered(&state) {
                presented_to_coverage = Some(presented_before + idx + 1);
            }
            if added_since_snapshot == 5 {
                added_since_snapshot = 0;
                snapshot(&state, &mut trajectory)?;
            }
        }
        if hit_cap {
            break StopReason::DemoCap;
        }
        let fb: Vec<FeedbackEvent> = state.feedback_for(&batch.batch_id).into_iter().cloned().collect();
        let fraction = round_correct_fraction(&batch, &fb);
        state.apply(SessionEvent::RoundClosed {
            batch_id: batch.batch_id.clone(),
            correct_fraction: fraction,
        })?;
        streak = if fraction >= 1.0 { streak + 1 } else { 0 };
        if state.presented_count() >= cfg.max_presented {
            break StopReason::PresentedCap;
        }
        if streak >= cfg.consecutive_correct_stop {
            break StopReason::ConsecutiveCorrect;
        }
    };
    snapshot(&state, &mut trajectory)?;

    Ok(SimResult {
        sampler: config.sampler,
        seed: config.seed,
        stop_reason,
        final_demos: state.demonstrations.demos.clone(),
        demos_requested,
        presented_count: state.presented_count(),
        pseudo_labeled: pseudo,
        batches,
        presented_to_coverage,
        trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample mean and (n-1) standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanSd { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Seeds where the slice sampler needed fewer presentations.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided exact binomial p-value over non-tied seeds.
    pub p_value: f64,
}

/// P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
pub fn sign_test(wins: usize, losses: usize, ties: usize) -> SignTest {
    let n = wins + losses;
    let mut p = 0.0;
    for k in wins..=n {
        // C(n, k) / 2^n in log space to stay finite for large n.
        let log_c: f64 = (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum();
        p += (log_c - n as f64 * std::f64::consts::LN_2).exp();
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: p.min(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub slice: SimResult,
    pub random: SimResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub presented_to_coverage: MeanSd,
    pub coverage_reached: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<MeanSd>,
    pub final_demos: MeanSd,
    pub stop_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub presented_budget: usize,
    pub slice: SamplerSummary,
    pub random: SamplerSummary,
    /// `1 - slice mean / random mean` of presented-to-coverage.
    pub coverage_reduction: f64,
    pub sign_test: SignTest,
    pub rows: Vec<SeedRow>,
}

fn summarize(results: &[&SimResult], budget: usize) -> SamplerSummary {
    let cov: Vec<f64> = results.iter().map(|r| r.coverage_cost(budget) as f64).collect();
    let scores: Vec<f64> = results
        .iter()
        .filter_map(|r| r.final_metrics().and_then(headline))
        .collect();
    let mut stop_reasons = BTreeMap::new();
    for r in results {
        *stop_reasons.entry(format!("{:?}", r.stop_reason)).or_insert(0) += 1;
    }
    SamplerSummary {
        presented_to_coverage: MeanSd::of(&cov),
        coverage_reached: results.iter().filter(|r| r.presented_to_coverage.is_some()).count(),
        final_score: (scores.len() == results.len() && !scores.is_empty()).then(|| MeanSd::of(&scores)),
        final_demos: MeanSd::of(
            &results
                .iter()
                .map(|r| r.final_demos.len() as f64)
                .collect::<Vec<_>>(),
        ),
        stop_reasons,
    }
}

/// Runs both samplers for every seed, in parallel, with shared seed demos.
pub fn compare_samplers(
    base: &SimConfig,
    seeds: &[u64],
    backend: Arc<dyn Backend>,
    pool: &[PoolRecord],
    test: &[PoolRecord],
) -> Result<ComparisonReport, SimError> {
    if seeds.len() < 2 {
        return Err(SimError::TooFewSeeds {
            need: 2,
            got: seeds.len(),
        });
    }
    let jobs: Vec<(u64, SamplerKind)> = seeds
        .iter()
        .flat_map(|&s| [(s, SamplerKind::Slice), (s, SamplerKind::Random)])
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(seed, sampler)| {
            let cfg = SimConfig {
                sampler,
                seed,
                ..base.clone()
            };
            run_simulation(&cfg, backend.clone(), pool, test)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let mut rows = Vec::with_capacity(seeds.len());
    let mut it = results.into_iter();
    for &seed in seeds {
        let slice = it.next().unwrap();
        let random = it.next().unwrap();
        rows.push(SeedRow { seed, slice, random });
    }
    let budget = base.session.max_presented;
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for r in &rows {
        match r.slice.coverage_cost(budget).cmp(&r.random.coverage_cost(budget)) {
            std::cmp::Ordering::Less => wins += 1,
            std::cmp::Ordering::Greater => losses += 1,
            std::cmp::Ordering::Equal => ties += 1,
        }
    }
    let slice = summarize(&rows.iter().map(|r| &r.slice).collect::<Vec<_>>(), budget);
    let random = summarize(&rows.iter().map(|r| &r.random).collect::<Vec<_>>(), budget);
    Ok(ComparisonReport {
        seeds: seeds.to_vec(),
        presented_budget: budget,
        coverage_reduction: 1.0 - slice.presented_to_coverage.mean / random.presented_to_coverage.mean,
        slice,
        random,
        sign_test: sign_test(wins, losses, ties),
        rows,
    })
}

/// Default simulation session settings for temporal tasks.
pub fn default_session() -> SessionConfig {
    SessionConfig {
        task: TaskKind::Temporal,
        ..SessionConfig::default()
    }
}
