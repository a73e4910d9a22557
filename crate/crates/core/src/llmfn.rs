//! The in-context function: prompt rendering, completion backends, retrying
//! inference, unanimity voting and leave-one-out checks on demonstrations.

use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{SessionState, Status};

pub mod http;
pub mod mock;

pub const DEFAULT_VOTES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task_description: String,
    pub demos: Vec<(String, String)>,
    pub query: String,
}

impl PromptSpec {
    /// Prompt for `query` using the session's stored demonstration order.
    pub fn from_state(state: &SessionState, query: impl Into<String>) -> Self {
        PromptSpec {
            task_description: state.demonstrations.task_description.clone(),
            demos: state.demonstrations.pairs(),
            query: query.into(),
        }
    }

    pub fn identity(&self) -> Vec<usize> {
        (0..self.demos.len()).collect()
    }
}

/// `description`, one `>> in => out` line per demo in `ordering`, then the
/// open query line.
pub fn build_prompt(spec: &PromptSpec, ordering: &[usize]) -> String {
    let mut out = String::with_capacity(64 + spec.demos.len() * 48);
    out.push_str(&spec.task_description);
    out.push('\n');
    for &i in ordering {
        let (input, output) = &spec.demos[i];
        out.push_str(&format!(">> {input} => {output}\n"));
    }
    out.push_str(&format!(">> {} =>", spec.query));
    out
}

/// The prompt without a query line, as shown to users.
pub fn render_demonstrations(task_description: &str, demos: &[(String, String)]) -> String {
    let mut out = String::from(task_description);
    for (input, output) in demos {
        out.push_str(&format!("\n>> {input} => {output}"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub output: String,
    /// Sum of generated-token log probabilities, when the backend reports them.
    pub total_logprob: Option<f64>,
    pub backend_id: String,
}

impl Prediction {
    pub fn new(output: &str, total_logprob: Option<f64>, backend_id: &str) -> Self {
        Prediction {
            output: clean_completion(output),
            total_logprob,
            backend_id: backend_id.to_string(),
        }
    }
}

/// First line of the completion, trimmed.
pub fn clean_completion(raw: &str) -> String {
    raw.trim_start()
        .split('\n')
        .next()
        .unwrap_or("")
        .trim()
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("quota exceeded: {0}")]
    Quota(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, BackendError::Rejected(_))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: BackendError },
    #[error(transparent)]
    Backend(BackendError),
    #[error("need at least {need} demonstrations, have {have}")]
    TooFewDemos { need: usize, have: usize },
    #[error("demonstration index {0} out of range")]
    DemoIndex(usize),
    #[error("example {0} is not unlabeled")]
    NotUnlabeled(String),
    #[error("unknown example {0}")]
    UnknownExample(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// One greedy completion of `prompt`.
    fn complete(&self, prompt: &str) -> Result<Prediction, BackendError>;

    /// Whether independent calls may run in parallel.
    fn concurrent_calls(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(4),
        }
    }
}

impl RetryPolicy {
    /// Same attempt count, no sleeping.
    pub fn immediate() -> Self {
        RetryPolicy {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Calls the backend, retrying retryable failures with capped exponential backoff.
pub fn infer(backend: &dyn Backend, prompt: &str, policy: &RetryPolicy) -> Result<Prediction, LlmError> {
    let attempts = policy.attempts.max(1);
    let mut attempt = 0;
    loop {
        match backend.complete(prompt) {
            Ok(mut p) => {
                p.output = clean_completion(&p.output);
                return Ok(p);
            }
            Err(e) if !e.is_retryable() => return Err(LlmError::Backend(e)),
            Err(e) => {
                attempt += 1;
                if attempt >= attempts {
                    return Err(LlmError::BackendUnavailable { attempts, last: e });
                }
                tracing::debug!(backend = backend.id(), attempt, error = %e, "retrying");
                let wait = policy.delay(attempt - 1);
                if !wait.is_zero() {
                    thread::sleep(wait);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum VoteResult {
    Unanimous { output: String, all: Vec<Prediction> },
    Split { best: Prediction, all: Vec<Prediction> },
}

impl VoteResult {
    pub fn is_unanimous(&self) -> bool {
        matches!(self, VoteResult::Unanimous { .. })
    }
}

fn factorial_at_most(n: usize, limit: usize) -> Option<usize> {
    let mut f = 1usize;
    for k in 2..=n {
        f = f.checked_mul(k)?;
        if f > limit {
            return None;
        }
    }
    Some(f)
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// `votes` demo orderings. They are pairwise distinct whenever enough
/// permutations exist; otherwise every permutation appears, padded randomly.
pub fn vote_orderings<R: Rng + ?Sized>(n: usize, votes: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let votes = votes.max(1);
    if factorial_at_most(n, votes).is_some() {
        let mut out = all_permutations(n);
        while out.len() < votes {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            out.push(p);
        }
        out.truncate(votes);
        return out;
    }
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(votes);
    while out.len() < votes {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Queries the function under several demo orderings. Agreement is unanimous;
/// otherwise the highest-probability vote wins, earlier votes breaking ties.
pub fn unanimity_vote<R: Rng + ?Sized>(
    spec: &PromptSpec,
    backend: &dyn Backend,
    rng: &mut R,
    votes: usize,
    policy: &RetryPolicy,
) -> Result<VoteResult, LlmError> {
    if spec.demos.is_empty() {
        return Err(LlmError::TooFewDemos { need: 1, have: 0 });
    }
    let prompts: Vec<String> = vote_orderings(spec.demos.len(), votes, rng)
        .iter()
        .map(|o| build_prompt(spec, o))
        .collect();
    let all: Vec<Prediction> = if backend.concurrent_calls() {
        prompts
            .par_iter()
            .map(|p| infer(backend, p, policy))
            .collect::<Result<_, _>>()?
    } else {
        prompts
            .iter()
            .map(|p| infer(backend, p, policy))
            .collect::<Result<_, _>>()?
    };
    if all.iter().all(|p| p.output == all[0].output) {
        return Ok(VoteResult::Unanimous {
            output: all[0].output.clone(),
            all,
        });
    }
    let score = |p: &Prediction| p.total_logprob.unwrap_or(f64::NEG_INFINITY);
    let mut best = 0;
    for (i, p) in all.iter().enumerate().skip(1) {
        if score(p) > score(&all[best]) {
            best = i;
        }
    }
    Ok(VoteResult::Split {
        best: all[best].clone(),
        all,
    })
}

/// Predicts demo `demo_index` from the others in stored order.
pub fn cross_validate_demo(
    spec: &PromptSpec,
    backend: &dyn Backend,
    demo_index: usize,
    policy: &RetryPolicy,
) -> Result<bool, LlmError> {
    if spec.demos.len() < 2 {
        return Err(LlmError::TooFewDemos {
            need: 2,
            have: spec.demos.len(),
        });
    }
    let (input, expected) = spec
        .demos
        .get(demo_index)
        .ok_or(LlmError::DemoIndex(demo_index))?
        .clone();
    let held_out = PromptSpec {
        task_description: spec.task_description.clone(),
        demos: spec
            .demos
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != demo_index)
            .map(|(_, d)| d.clone())
            .collect(),
        query: input,
    };
    let p = infer(backend, &build_prompt(&held_out, &held_out.identity()), policy)?;
    Ok(p.output.trim() == expected.trim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CandidateOutcome {
    /// Shown to the user with this draft.
    Surfaced(Prediction),
    /// Hidden and counted correct.
    PseudoLabeled(String),
}

/// Drafts an output for an unlabeled example. With the gate open, unanimous
/// votes pseudo-label the example instead of surfacing it.
pub fn predict_candidate<R: Rng + ?Sized>(
    state: &SessionState,
    backend: &dyn Backend,
    example_id: &str,
    rng: &mut R,
    policy: &RetryPolicy,
) -> Result<CandidateOutcome, LlmError> {
    let ex = state
        .pool
        .get(example_id)
        .ok_or_else(|| LlmError::UnknownExample(example_id.to_string()))?;
    if ex.status != Status::Unlabeled {
        return Err(LlmError::NotUnlabeled(example_id.to_string()));
    }
    let spec = PromptSpec::from_state(state, ex.input.clone());
    if !state.gate_open || spec.demos.is_empty() {
        let p = infer(backend, &build_prompt(&spec, &spec.identity()), policy)?;
        return Ok(CandidateOutcome::Surfaced(p));
    }
    Ok(match unanimity_vote(&spec, backend, rng, state.config.votes, policy)? {
        VoteResult::Unanimous { output, .. } => CandidateOutcome::PseudoLabeled(output),
        VoteResult::Split { best, .. } => CandidateOutcome::Surfaced(best),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::mock::{ConstantBackend, UnreachableBackend};
    use super::*;

    fn spec(n: usize) -> PromptSpec {
        PromptSpec {
            task_description: "Extract dates.".into(),
            demos: (0..n).map(|i| (format!("in{i}"), format!("out{i}"))).collect(),
            query: "q".into(),
        }
    }

    /// Replays scripted outputs in call order.
    struct Scripted {
        outputs: Mutex<Vec<(String, Option<f64>)>>,
    }

    impl Scripted {
        fn new(items: &[(&str, Option<f64>)]) -> Self {
            Scripted {
                outputs: Mutex::new(items.iter().rev().map(|(o, l)| (o.to_string(), *l)).collect()),
            }
        }
    }

    impl Backend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &str) -> Result<Prediction, BackendError> {
            let (o, l) = self.outputs.lock().unwrap().pop().expect("script exhausted");
            Ok(Prediction::new(&o, l, "scripted"))
        }
        fn concurrent_calls(&self) -> bool {
            false
        }
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &str) -> Result<Prediction, BackendError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
                Err(BackendError::Timeout)
            } else {
                Ok(Prediction::new("ok", None, "flaky"))
            }
        }
    }

    #[test]
    fn prompt_format() {
        assert_eq!(build_prompt(&spec(0), &[]), "Extract dates.\n>> q =>");
        assert_eq!(
            build_prompt(&spec(2), &[0, 1]),
            "Extract dates.\n>> in0 => out0\n>> in1 => out1\n>> q =>"
        );
        assert_eq!(
            build_prompt(&spec(2), &[1, 0]),
            "Extract dates.\n>> in1 => out1\n>> in0 => out0\n>> q =>"
        );
        assert_eq!(
            render_demonstrations("D", &spec(2).demos),
            "D\n>> in0 => out0\n>> in1 => out1"
        );
        assert_eq!(render_demonstrations("D", &[]), "D");
    }

    #[test]
    fn completions_are_trimmed_to_one_line() {
        assert_eq!(clean_completion("  today == 2014-03-30 \n>> next"), "today == 2014-03-30");
        assert_eq!(clean_completion("\n\nN/A\n"), "N/A");
        assert_eq!(clean_completion(""), "");
    }

    #[test]
    fn infer_retries_then_gives_up() {
        let flaky = Flaky { failures: 2, calls: AtomicUsize::new(0) };
        let p = infer(&flaky, "x", &RetryPolicy::immediate()).unwrap();
        assert_eq!(p.output, "ok");
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 3);

        let down = UnreachableBackend::default();
        let err = infer(&down, "x", &RetryPolicy::immediate()).unwrap_err();
        assert!(matches!(err, LlmError::BackendUnavailable { attempts: 3, .. }), "{err}");
        assert_eq!(down.calls(), 3);
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy {
            attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        let waits: Vec<u128> = (0..5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(waits, [100, 200, 350, 350, 350]);
    }

    #[test]
    fn orderings_are_distinct_when_possible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 3..8 {
            let o = vote_orderings(n, 3, &mut rng);
            assert_eq!(o.len(), 3);
            assert!(o[0] != o[1] && o[1] != o[2] && o[0] != o[2]);
        }
        let two = vote_orderings(2, 3, &mut rng);
        assert!(two.contains(&vec![0, 1]) && two.contains(&vec![1, 0]));
        assert_eq!(vote_orderings(1, 3, &mut rng), vec![vec![0]; 3]);
    }

    #[test]
    fn vote_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = RetryPolicy::immediate();
        let all_x = Scripted::new(&[("X", Some(-1.0)), ("X", Some(-2.0)), ("X", None)]);
        let v = unanimity_vote(&spec(3), &all_x, &mut rng, 3, &p).unwrap();
        assert!(matches!(v, VoteResult::Unanimous { ref output, .. } if output == "X"));

        let split = Scripted::new(&[("X", Some(-3.0)), ("X", Some(-2.0)), ("Y", Some(-0.5))]);
        match unanimity_vote(&spec(3), &split, &mut rng, 3, &p).unwrap() {
            VoteResult::Split { best, all } => {
                assert_eq!(best.output, "Y");
                assert_eq!(all.len(), 3);
            }
            other => panic!("{other:?}"),
        }

        let tie = Scripted::new(&[("A", None), ("B", None), ("B", None)]);
        match unanimity_vote(&spec(3), &tie, &mut rng, 3, &p).unwrap() {
            VoteResult::Split { best, .. } => assert_eq!(best.output, "A"),
            other => panic!("{other:?}"),
        }

        let one = ConstantBackend::new("Z");
        assert!(unanimity_vote(&spec(1), &one, &mut rng, 3, &p).unwrap().is_unanimous());
        assert!(matches!(
            unanimity_vote(&spec(0), &one, &mut rng, 3, &p),
            Err(LlmError::TooFewDemos { need: 1, have: 0 })
        ));
    }

    #[test]
    fn cross_validation_needs_two_demos() {
        let p = RetryPolicy::immediate();
        let echo = ConstantBackend::new("out1");
        assert!(cross_validate_demo(&spec(3), &echo, 1, &p).unwrap());
        assert!(!cross_validate_demo(&spec(3), &echo, 0, &p).unwrap());
        assert!(!cross_validate_demo(&spec(2), &ConstantBackend::new(""), 0, &p).unwrap());
        assert!(matches!(
            cross_validate_demo(&spec(1), &echo, 0, &p),
            Err(LlmError::TooFewDemos { need: 2, have: 1 })
        ));
        assert!(matches!(
            cross_validate_demo(&spec(2), &echo, 5, &p),
            Err(LlmError::DemoIndex(5))
        ));
    }
}
