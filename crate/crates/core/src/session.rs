//! Session state and its append-only event log.
//!
//! Every mutation goes through [`SessionState::apply`], which validates a
//! [`SessionEvent`], updates the state and appends the event. Folding the log
//! of a state into an empty one with [`SessionState::replay`] yields an equal
//! state.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slicing::SliceRow;
use crate::textdiff::NA;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("unknown example id {0:?}")]
    UnknownExample(String),
    #[error("duplicate example id {0:?}")]
    DuplicateExampleId(String),
    #[error("event iteration {got} does not match session iteration {expected}")]
    IterationMismatch { expected: u32, got: u32 },
    #[error("example {id:?} cannot go from {from:?} via {action:?}")]
    InvalidTransition {
        id: String,
        from: Status,
        action: Action,
    },
    #[error("EditedOutput for {0:?} carries no edited output")]
    MissingEditedOutput(String),
    #[error("example {0:?} has no draft output to edit")]
    NoDraft(String),
    #[error("edited output for {0:?} equals the draft")]
    EditUnchanged(String),
    #[error("no output available to add {0:?} as a demonstration")]
    MissingOutput(String),
    #[error("{0:?} is already a demonstration")]
    DuplicateDemo(String),
    #[error("{0:?} is not a demonstration")]
    NotADemo(String),
    #[error("demonstration set is full ({0} demonstrations)")]
    DemoCapReached(usize),
    #[error("batch {0:?} is not the open batch")]
    StaleBatch(String),
    #[error("example {0:?} was already surfaced or labeled")]
    AlreadySurfaced(String),
    #[error("invalid pool record on id {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("round fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("event log must start with a Created event")]
    MissingCreated,
    #[error("session already created")]
    AlreadyCreated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Unlabeled,
    ImplicitCorrect,
    Corrected,
    PseudoLabeled,
    DemoPositive,
    DemoNegative,
    Skipped,
}

impl Status {
    pub fn is_demo(self) -> bool {
        matches!(self, Status::DemoPositive | Status::DemoNegative)
    }
}

/// One line of an uploaded pool or test file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_output: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl PoolRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id must be non-empty".into());
        }
        if self.input.trim().is_empty() {
            return Err("input must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    pub gold_output: Option<String>,
    pub draft_output: Option<String>,
    /// Output after user action or pseudo-labeling.
    pub output: Option<String>,
    pub status: Status,
    pub meta: BTreeMap<String, String>,
    /// Shown to the user in some batch.
    pub surfaced: bool,
    /// Status to restore if the example is removed from the demonstrations.
    pub status_before_demo: Option<Status>,
}

impl Example {
    fn from_record(r: PoolRecord) -> Self {
        Example {
            id: r.id,
            input: r.input,
            gold_output: r.gold_output,
            draft_output: None,
            output: None,
            status: Status::Unlabeled,
            meta: r.meta,
            surfaced: false,
            status_before_demo: None,
        }
    }

    pub fn family(&self) -> Option<&str> {
        self.meta.get("family").map(String::as_str)
    }

    /// Never surfaced and never labeled.
    pub fn is_eligible(&self) -> bool {
        self.status == Status::Unlabeled && !self.surfaced
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub example_id: String,
    pub input: String,
    pub output: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub task_description: String,
    pub demos: Vec<Demo>,
}

impl DemonstrationSet {
    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.demos
            .iter()
            .map(|d| (d.input.clone(), d.output.clone()))
            .collect()
    }

    pub fn contains_example(&self, id: &str) -> bool {
        self.demos.iter().any(|d| d.example_id == id)
    }

    fn push(&mut self, demo: Demo, cap: usize) -> Result<(), SessionError> {
        if self.demos.iter().any(|d| d.input == demo.input) {
            return Err(SessionError::DuplicateDemo(demo.example_id));
        }
        if self.demos.len() >= cap {
            return Err(SessionError::DemoCapReached(self.demos.len()));
        }
        self.demos.push(demo);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    NoChange,
    EditedOutput,
    AddedPositive,
    AddedNegative,
    Removed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub iteration: u32,
    pub example_id: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_output: Option<String>,
    /// Milliseconds since the Unix epoch, supplied by the caller.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// `span == YYYY-MM-DD` outputs scored by extraction/normalization P/R/F1.
    Temporal,
    /// Free text scored by ROUGE-L and BLEU-4.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub batch_size: usize,
    pub clusters: usize,
    pub min_slice_size: usize,
    pub gate_threshold: f64,
    pub slice_accuracy_stop: f64,
    pub max_demos: usize,
    pub max_presented: usize,
    pub consecutive_correct_stop: usize,
    pub votes: usize,
    pub max_filter_attempts: usize,
    pub task: TaskKind,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            batch_size: 5,
            clusters: 20,
            min_slice_size: 10,
            gate_threshold: 0.70,
            slice_accuracy_stop: 0.80,
            max_demos: 40,
            max_presented: 100,
            consecutive_correct_stop: 5,
            votes: 3,
            max_filter_attempts: 25,
            task: TaskKind::Temporal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, field: &str, message: &str| {
            if !ok {
                errors.push(FieldError {
                    field: field.into(),
                    message: message.into(),
                });
            }
        };
        check(
            (1..=5).contains(&self.batch_size),
            "batch_size",
            "must be between 1 and 5",
        );
        check(self.clusters >= 1, "clusters", "must be positive");
        check(self.min_slice_size >= 1, "min_slice_size", "must be positive");
        check(
            (0.0..=1.0).contains(&self.gate_threshold),
            "gate_threshold",
            "must lie in [0, 1]",
        );
        check(
            (0.0..=1.0).contains(&self.slice_accuracy_stop),
            "slice_accuracy_stop",
            "must lie in [0, 1]",
        );
        check(self.max_demos >= 1, "max_demos", "must be positive");
        check(self.max_presented >= 1, "max_presented", "must be positive");
        check(
            self.consecutive_correct_stop >= 1,
            "consecutive_correct_stop",
            "must be positive",
        );
        check(self.votes >= 1, "votes", "must be positive");
        check(
            self.max_filter_attempts >= self.batch_size,
            "max_filter_attempts",
            "must be at least batch_size",
        );
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedCandidate {
    pub example_id: String,
    pub slice_id: Option<String>,
    pub draft_output: String,
    pub total_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub example_id: String,
    pub slice_id: Option<String>,
    pub output: String,
}

/// A batch as recorded in the log: what was shown and what was filtered out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedBatch {
    pub batch_id: String,
    pub iteration: u32,
    pub candidates: Vec<ServedCandidate>,
    pub pseudo_labeled: Vec<PseudoLabel>,
    pub slice_table: Vec<SliceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum SessionEvent {
    Created {
        task_description: String,
        config: SessionConfig,
        rng_seed: u64,
    },
    PoolAppended {
        records: Vec<PoolRecord>,
    },
    DescriptionEdited {
        text: String,
    },
    BatchServed(ServedBatch),
    Feedback(FeedbackEvent),
    RoundClosed {
        batch_id: String,
        correct_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub config: SessionConfig,
    pub pool: IndexMap<String, Example>,
    pub demonstrations: DemonstrationSet,
    pub events: Vec<SessionEvent>,
    /// One plus the number of closed rounds.
    pub iteration: u32,
    pub gate_open: bool,
    pub round_accuracies: Vec<f64>,
    pub rng_seed: u64,
    pub open_batch: Option<ServedBatch>,
    pub batches_served: u32,
}

impl SessionState {
    /// Uninitialized state, the starting point of a replay.
    fn blank() -> Self {
        SessionState {
            schema_version: SCHEMA_VERSION,
            config: SessionConfig::default(),
            pool: IndexMap::new(),
            demonstrations: DemonstrationSet::default(),
            events: Vec::new(),
            iteration: 1,
            gate_open: false,
            round_accuracies: Vec::new(),
            rng_seed: 0,
            open_batch: None,
            batches_served: 0,
        }
    }

    pub fn new(task_description: impl Into<String>, config: SessionConfig, rng_seed: u64) -> Self {
        let mut state = Self::blank();
        state
            .apply(SessionEvent::Created {
                task_description: task_description.into(),
                config,
                rng_seed,
            })
            .expect("Created applies to a blank state");
        state
    }

    /// Folds an event log into a fresh state.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a SessionEvent>) -> Result<Self, SessionError> {
        let mut state = Self::blank();
        for ev in events {
            state.apply(ev.clone())?;
        }
        if state.events.is_empty() {
            return Err(SessionError::MissingCreated);
        }
        Ok(state)
    }

    pub fn example(&self, id: &str) -> Result<&Example, SessionError> {
        self.pool
            .get(id)
            .ok_or_else(|| SessionError::UnknownExample(id.to_string()))
    }

    pub fn presented_count(&self) -> usize {
        self.pool.values().filter(|e| e.surfaced).count()
    }

    /// Validates and applies one event, then appends it to the log.
    pub fn apply(&mut self, event: SessionEvent) -> Result<(), SessionError> {
        if self.events.is_empty() != matches!(event, SessionEvent::Created { .. }) {
            return Err(if self.events.is_empty() {
                SessionError::MissingCreated
            } else {
                SessionError::AlreadyCreated
            });
        }
        match &event {
            SessionEvent::Created {
                task_description,
                config,
                rng_seed,
            } => {
                self.config = config.clone();
                self.rng_seed = *rng_seed;
                self.demonstrations.task_description = task_description.clone();
            }
            SessionEvent::PoolAppended { records } => self.append_pool(records)?,
            SessionEvent::DescriptionEdited { text } => {
                self.demonstrations.task_description = text.clone();
            }
            SessionEvent::BatchServed(batch) => self.serve(batch)?,
            SessionEvent::Feedback(fb) => self.apply_feedback(fb)?,
            SessionEvent::RoundClosed {
                batch_id,
                correct_fraction,
            } => self.close_round(batch_id, *correct_fraction)?,
        }
        self.events.push(event);
        Ok(())
    }

    fn append_pool(&mut self, records: &[PoolRecord]) -> Result<(), SessionError> {
        let mut seen = std::collections::HashSet::new();
        for r in records {
            r.validate().map_err(|reason| SessionError::InvalidRecord {
                id: r.id.clone(),
                reason,
            })?;
            if self.pool.contains_key(&r.id) || !seen.insert(r.id.as_str()) {
                return Err(SessionError::DuplicateExampleId(r.id.clone()));
            }
        }
        for r in records {
            self.pool.insert(r.id.clone(), Example::from_record(r.clone()));
        }
        Ok(())
    }

    fn serve(&mut self, batch: &ServedBatch) -> Result<(), SessionError> {
        if batch.iteration != self.iteration {
            return Err(SessionError::IterationMismatch {
                expected: self.iteration,
                got: batch.iteration,
            });
        }
        let ids = batch
            .candidates
            .iter()
            .map(|c| &c.example_id)
            .chain(batch.pseudo_labeled.iter().map(|p| &p.example_id));
        let mut seen = std::collections::HashSet::new();
        for id in ids {
            if !self.example(id)?.is_eligible() || !seen.insert(id) {
                return Err(SessionError::AlreadySurfaced(id.clone()));
            }
        }
        for c in &batch.candidates {
            let ex = &mut self.pool[&c.example_id];
            ex.draft_output = Some(c.draft_output.clone());
            ex.surfaced = true;
        }
        for p in &batch.pseudo_labeled {
            let ex = &mut self.pool[&p.example_id];
            ex.draft_output = Some(p.output.clone());
            ex.output = Some(p.output.clone());
            ex.status = Status::PseudoLabeled;
        }
        self.batches_served += 1;
        self.open_batch = Some(batch.clone());
        Ok(())
    }

    fn apply_feedback(&mut self, fb: &FeedbackEvent) -> Result<(), SessionError> {
        if fb.iteration != self.iteration {
            return Err(SessionError::IterationMismatch {
                expected: self.iteration,
                got: fb.iteration,
            });
        }
        let cap = self.config.max_demos;
        let ex = self
            .pool
            .get_mut(&fb.example_id)
            .ok_or_else(|| SessionError::UnknownExample(fb.example_id.clone()))?;
        let invalid = |ex: &Example| SessionError::InvalidTransition {
            id: ex.id.clone(),
            from: ex.status,
            action: fb.action,
        };
        match fb.action {
            Action::NoChange | Action::Skipped => {
                if ex.status != Status::Unlabeled {
                    return Err(invalid(ex));
                }
                if fb.action == Action::NoChange {
                    ex.status = Status::ImplicitCorrect;
                    ex.output = ex.draft_output.clone();
                } else {
                    ex.status = Status::Skipped;
                }
            }
            Action::EditedOutput => {
                if ex.status != Status::Unlabeled {
                    return Err(invalid(ex));
                }
                let edited = fb
                    .edited_output
                    .as_ref()
                    .ok_or_else(|| SessionError::MissingEditedOutput(ex.id.clone()))?;
                let draft = ex
                    .draft_output
                    .as_ref()
                    .ok_or_else(|| SessionError::NoDraft(ex.id.clone()))?;
                if edited == draft {
                    return Err(SessionError::EditUnchanged(ex.id.clone()));
                }
                ex.output = Some(edited.clone());
                ex.status = Status::Corrected;
            }
            Action::AddedPositive | Action::AddedNegative => {
                if ex.status.is_demo() {
                    return Err(SessionError::DuplicateDemo(ex.id.clone()));
                }
                let (output, polarity, status) = if fb.action == Action::AddedNegative {
                    (NA.to_string(), Polarity::Negative, Status::DemoNegative)
                } else {
                    let out = fb
                        .edited_output
                        .clone()
                        .or_else(|| ex.output.clone())
                        .or_else(|| ex.draft_output.clone())
                        .or_else(|| ex.gold_output.clone())
                        .ok_or_else(|| SessionError::MissingOutput(ex.id.clone()))?;
                    (out, Polarity::Positive, Status::DemoPositive)
                };
                self.demonstrations.push(
                    Demo {
                        example_id: ex.id.clone(),
                        input: ex.input.clone(),
                        output: output.clone(),
                        polarity,
                    },
                    cap,
                )?;
                ex.status_before_demo = Some(ex.status);
                ex.status = status;
                ex.output = Some(output);
            }
            Action::Removed => {
                if !ex.status.is_demo() {
                    return Err(SessionError::NotADemo(ex.id.clone()));
                }
                self.demonstrations.demos.retain(|d| d.example_id != ex.id);
                ex.status = ex.status_before_demo.take().unwrap_or(Status::Unlabeled);
            }
        }
        Ok(())
    }

    fn close_round(&mut self, batch_id: &str, fraction: f64) -> Result<(), SessionError> {
        match &self.open_batch {
            Some(b) if b.batch_id == batch_id => {}
            _ => return Err(SessionError::StaleBatch(batch_id.to_string())),
        }
        self.update_gate(fraction)?;
        self.open_batch = None;
        self.iteration += 1;
        Ok(())
    }

    /// Records a round's correct fraction; the gate opens once the last two
    /// rounds both reach the threshold and never closes again.
    pub fn update_gate(&mut self, fraction: f64) -> Result<(), SessionError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(SessionError::InvalidFraction(fraction));
        }
        self.round_accuracies.push(fraction);
        let threshold = self.config.gate_threshold;
        if let [.., a, b] = self.round_accuracies[..] {
            if a >= threshold && b >= threshold {
                self.gate_open = true;
            }
        }
        Ok(())
    }

    /// Correctness verdicts of non-demonstration examples.
    pub fn verdicts(&self) -> HashMap<String, bool> {
        self.pool
            .values()
            .filter_map(|e| {
                let v = match e.status {
                    Status::ImplicitCorrect | Status::PseudoLabeled => true,
                    Status::Corrected => false,
                    _ => return None,
                };
                Some((e.id.clone(), v))
            })
            .collect()
    }

    pub fn feedback_for(&self, batch_id: &str) -> Vec<&FeedbackEvent> {
        let mut in_batch = false;
        let mut out = Vec::new();
        for ev in &self.events {
            match ev {
                SessionEvent::BatchServed(b) => in_batch = b.batch_id == batch_id,
                SessionEvent::Feedback(fb) if in_batch => out.push(fb),
                _ => {}
            }
        }
        out
    }
}

/// Correct fraction of a round: a surfaced candidate is correct when its
/// output was left as drafted; pseudo-labeled examples count as correct.
pub fn round_correct_fraction(batch: &ServedBatch, feedback: &[FeedbackEvent]) -> f64 {
    let total = batch.candidates.len() + batch.pseudo_labeled.len();
    if total == 0 {
        return 1.0;
    }
    let correct = batch
        .candidates
        .iter()
        .filter(|c| {
            feedback
                .iter()
                .filter(|fb| fb.example_id == c.example_id)
                .all(|fb| match fb.action {
                    Action::NoChange | Action::Removed => true,
                    Action::EditedOutput | Action::Skipped => false,
                    Action::AddedNegative => c.draft_output.trim() == NA,
                    Action::AddedPositive => fb
                        .edited_output
                        .as_ref()
                        .is_none_or(|o| *o == c.draft_output),
                })
        })
        .count();
    (correct + batch.pseudo_labeled.len()) as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, input: &str) -> PoolRecord {
        PoolRecord {
            id: id.into(),
            input: input.into(),
            gold_output: None,
            meta: BTreeMap::new(),
        }
    }

    fn fb(state: &SessionState, id: &str, action: Action, edited: Option<&str>) -> SessionEvent {
        SessionEvent::Feedback(FeedbackEvent {
            iteration: state.iteration,
            example_id: id.into(),
            action,
            edited_output: edited.map(String::from),
            timestamp: 0,
        })
    }

    fn served(state: &SessionState, ids: &[&str]) -> SessionEvent {
        SessionEvent::BatchServed(ServedBatch {
            batch_id: format!("b{}", state.batches_served),
            iteration: state.iteration,
            candidates: ids
                .iter()
                .map(|id| ServedCandidate {
                    example_id: id.to_string(),
                    slice_id: None,
                    draft_output: format!("draft {id}"),
                    total_logprob: None,
                })
                .collect(),
            pseudo_labeled: vec![],
            slice_table: vec![],
        })
    }

    fn session(n: usize) -> SessionState {
        let mut s = SessionState::new("extract dates", SessionConfig::default(), 7);
        let records = (0..n).map(|i| record(&format!("e{i}"), &format!("input {i}"))).collect();
        s.apply(SessionEvent::PoolAppended { records }).unwrap();
        s
    }

    #[test]
    fn no_change_marks_implicit_correct() {
        let mut s = session(2);
        s.apply(served(&s, &["e0"])).unwrap();
        s.apply(fb(&s, "e0", Action::NoChange, None)).unwrap();
        assert_eq!(s.pool["e0"].status, Status::ImplicitCorrect);
        assert_eq!(s.pool["e0"].output.as_deref(), Some("draft e0"));
    }

    #[test]
    fn added_negative_forces_na() {
        let mut s = session(2);
        s.apply(fb(&s, "e1", Action::AddedNegative, Some("ignored"))).unwrap();
        assert_eq!(s.pool["e1"].status, Status::DemoNegative);
        assert_eq!(s.demonstrations.len(), 1);
        assert_eq!(s.demonstrations.demos[0].output, NA);
        assert_eq!(s.demonstrations.demos[0].polarity, Polarity::Negative);
    }

    #[test]
    fn feedback_errors() {
        let mut s = session(2);
        assert_eq!(
            s.apply(fb(&s, "nope", Action::NoChange, None)),
            Err(SessionError::UnknownExample("nope".into()))
        );
        assert_eq!(
            s.apply(fb(&s, "e0", Action::Removed, None)),
            Err(SessionError::NotADemo("e0".into()))
        );
        s.apply(fb(&s, "e0", Action::AddedPositive, Some("x"))).unwrap();
        assert_eq!(
            s.apply(fb(&s, "e0", Action::AddedPositive, Some("x"))),
            Err(SessionError::DuplicateDemo("e0".into()))
        );
        let mut stale = FeedbackEvent {
            iteration: 9,
            example_id: "e1".into(),
            action: Action::NoChange,
            edited_output: None,
            timestamp: 0,
        };
        assert!(matches!(
            s.apply(SessionEvent::Feedback(stale.clone())),
            Err(SessionError::IterationMismatch { expected: 1, got: 9 })
        ));
        stale.iteration = 1;
        stale.action = Action::EditedOutput;
        assert_eq!(
            s.apply(SessionEvent::Feedback(stale)),
            Err(SessionError::MissingEditedOutput("e1".into()))
        );
        // Failed events leave no trace in the log.
        assert_eq!(s.events.len(), 3);
    }

    #[test]
    fn edit_requires_a_different_draft() {
        let mut s = session(1);
        assert_eq!(
            s.apply(fb(&s, "e0", Action::EditedOutput, Some("x"))),
            Err(SessionError::NoDraft("e0".into()))
        );
        s.apply(served(&s, &["e0"])).unwrap();
        assert_eq!(
            s.apply(fb(&s, "e0", Action::EditedOutput, Some("draft e0"))),
            Err(SessionError::EditUnchanged("e0".into()))
        );
        s.apply(fb(&s, "e0", Action::EditedOutput, Some("fixed"))).unwrap();
        s.apply(fb(&s, "e0", Action::AddedPositive, None)).unwrap();
        assert_eq!(s.demonstrations.demos[0].output, "fixed");
        s.apply(fb(&s, "e0", Action::Removed, None)).unwrap();
        assert_eq!(s.pool["e0"].status, Status::Corrected);
        assert!(s.demonstrations.is_empty());
    }

    #[test]
    fn duplicate_pool_ids_are_rejected() {
        let mut s = session(1);
        let err = s
            .apply(SessionEvent::PoolAppended {
                records: vec![record("e0", "again")],
            })
            .unwrap_err();
        assert_eq!(err, SessionError::DuplicateExampleId("e0".into()));
        let err = s
            .apply(SessionEvent::PoolAppended {
                records: vec![record("x", "a"), record("x", "b")],
            })
            .unwrap_err();
        assert_eq!(err, SessionError::DuplicateExampleId("x".into()));
    }

    #[test]
    fn demo_cap_is_enforced() {
        let mut s = session(45);
        for i in 0..40 {
            s.apply(fb(&s, &format!("e{i}"), Action::AddedPositive, Some("y")))
                .unwrap();
        }
        assert_eq!(
            s.apply(fb(&s, "e40", Action::AddedPositive, Some("y"))),
            Err(SessionError::DemoCapReached(40))
        );
        assert_eq!(s.demonstrations.len(), 40);
    }

    #[test]
    fn gate_needs_two_consecutive_rounds_and_stays_open() {
        let mut s = session(0);
        s.update_gate(0.8).unwrap();
        assert!(!s.gate_open);
        s.update_gate(0.7).unwrap();
        assert!(s.gate_open);
        s.update_gate(0.2).unwrap();
        assert!(s.gate_open);
        assert_eq!(s.update_gate(1.5), Err(SessionError::InvalidFraction(1.5)));
    }

    #[test]
    fn gate_resets_on_a_bad_round() {
        let mut s = session(0);
        for f in [0.9, 0.5, 0.9] {
            s.update_gate(f).unwrap();
        }
        assert!(!s.gate_open);
    }

    #[test]
    fn closing_a_round_advances_iteration() {
        let mut s = session(3);
        s.apply(served(&s, &["e0", "e1"])).unwrap();
        let err = s.apply(SessionEvent::RoundClosed {
            batch_id: "other".into(),
            correct_fraction: 1.0,
        });
        assert_eq!(err, Err(SessionError::StaleBatch("other".into())));
        s.apply(SessionEvent::RoundClosed {
            batch_id: "b0".into(),
            correct_fraction: 1.0,
        })
        .unwrap();
        assert_eq!(s.iteration, 2);
        assert!(s.open_batch.is_none());
        assert_eq!(
            s.apply(served(&s, &["e0"])),
            Err(SessionError::AlreadySurfaced("e0".into()))
        );
    }

    #[test]
    fn replay_reproduces_state() {
        let mut s = session(4);
        s.apply(fb(&s, "e3", Action::AddedPositive, Some("gold"))).unwrap();
        s.apply(served(&s, &["e0", "e1", "e2"])).unwrap();
        s.apply(fb(&s, "e0", Action::NoChange, None)).unwrap();
        s.apply(fb(&s, "e1", Action::EditedOutput, Some("fixed"))).unwrap();
        s.apply(fb(&s, "e1", Action::AddedPositive, None)).unwrap();
        s.apply(fb(&s, "e2", Action::AddedNegative, None)).unwrap();
        s.apply(SessionEvent::RoundClosed {
            batch_id: "b0".into(),
            correct_fraction: 0.4,
        })
        .unwrap();
        let replayed = SessionState::replay(&s.events).unwrap();
        assert_eq!(replayed, s);

        let json = serde_json::to_string(&s).unwrap();
        let back: SessionState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn replay_requires_created_first() {
        let ev = SessionEvent::DescriptionEdited { text: "x".into() };
        assert_eq!(
            SessionState::replay([&ev]),
            Err(SessionError::MissingCreated)
        );
        let s = session(0);
        let mut events = s.events.clone();
        events.push(s.events[0].clone());
        assert_eq!(
            SessionState::replay(&events),
            Err(SessionError::AlreadyCreated)
        );
    }

    #[test]
    fn round_fraction_counts_unchanged_outputs() {
        let mut s = session(5);
        s.apply(served(&s, &["e0", "e1", "e2", "e3"])).unwrap();
        let mut batch = s.open_batch.clone().unwrap();
        batch.pseudo_labeled.push(PseudoLabel {
            example_id: "e4".into(),
            slice_id: None,
            output: "p".into(),
        });
        let mk = |id: &str, action, edited: Option<&str>| FeedbackEvent {
            iteration: 1,
            example_id: id.into(),
            action,
            edited_output: edited.map(String::from),
            timestamp: 0,
        };
        let feedback = [
            mk("e0", Action::NoChange, None),
            mk("e1", Action::EditedOutput, Some("x")),
            mk("e1", Action::AddedPositive, Some("x")),
            mk("e2", Action::AddedPositive, None),
            mk("e3", Action::AddedNegative, None),
        ];
        // e0, e2 and the pseudo-label are correct.
        assert_eq!(round_correct_fraction(&batch, &feedback), 3.0 / 5.0);
    }

    #[test]
    fn config_validation_reports_fields() {
        let cfg = SessionConfig {
            batch_size: 0,
            gate_threshold: 1.5,
            ..SessionConfig::default()
        };
        let errs = cfg.validate().unwrap_err();
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["batch_size", "gate_threshold"]);
        assert!(SessionConfig::default().validate().is_ok());
    }
}
