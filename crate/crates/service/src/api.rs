//! REST API under `/v1`.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use curata::engine::{evaluate_test_set, Engine, EngineError, SamplerKind};
use curata::lingo::Lingo;
use curata::llmfn::{render_demonstrations, RetryPolicy};
use curata::metrics::EvalReport;
use curata::session::{
    round_correct_fraction, Action, FeedbackEvent, FieldError, Polarity, PoolRecord, ServedBatch,
    SessionConfig, SessionError, SessionEvent, SessionState, Status,
};
use curata::slicing::SliceRow;
use curata::textdiff::{diff_spans, DiffSpans};
use serde::{Deserialize, Serialize};

use crate::store::{backend_for, lock, Session, Store, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    /// Static bearer token; `None` disables auth.
    pub token: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub fields: Vec<FieldError>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("session {id} not found"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            fields: self.fields,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::StaleBatch(_) | SessionError::DemoCapReached(_) | SessionError::DuplicateDemo(_) => {
                StatusCode::CONFLICT
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Session(s) => s.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        if e.is_exhausted() {
            return ApiError::new(StatusCode::CONFLICT, e.to_string());
        }
        match e {
            EngineError::Llm(_) => ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()),
            EngineError::Session(s) => s.into(),
            EngineError::Metrics(m) => ApiError::bad_request(m.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/pool", post(append_pool))
        .route("/sessions/{id}/demos", post(add_demo).get(list_demos))
        .route("/sessions/{id}/demos/{example_id}", delete(remove_demo))
        .route("/sessions/{id}/description", put(edit_description))
        .route("/sessions/{id}/batch", post(next_batch))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/prompt", get(prompt))
        .route("/sessions/{id}/state", get(summary))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/evaluate", post(evaluate))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .nest("/v1", v1)
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Runs `f` on the locked session off the async runtime.
async fn with_session<T, F>(app: &AppState, id: &str, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &AppState) -> ApiResult<T> + Send + 'static,
{
    let session = app.store.get(id).ok_or_else(|| ApiError::not_found(id))?;
    let app = app.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = lock(&session);
        f(&mut guard, &app)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub task_description: String,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<Created>)> {
    let config: SessionConfig = match req.config {
        None => SessionConfig::default(),
        Some(v) => serde_json::from_value(v).map_err(|e| ApiError {
            status: StatusCode::BAD_REQUEST,
            message: "invalid config".into(),
            fields: vec![FieldError {
                field: "config".into(),
                message: e.to_string(),
            }],
        })?,
    };
    if let Err(fields) = config.validate() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            message: "invalid config".into(),
            fields,
        });
    }
    let seed = req.rng_seed.unwrap_or_else(rand::random);
    let store = app.store.clone();
    let id = tokio::task::spawn_blocking(move || store.create(&req.task_description, config, seed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<String>> {
    Json(app.store.ids())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Rejected {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoolUpload {
    pub accepted: usize,
    pub rejected: Vec<Rejected>,
}

/// Parses JSONL records; returns good records and per-line rejections
/// (1-based line numbers).
pub fn parse_records(body: &str) -> (Vec<(usize, PoolRecord)>, Vec<Rejected>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PoolRecord>(line) {
            Ok(r) => match r.validate() {
                Ok(()) => ok.push((i + 1, r)),
                Err(reason) => bad.push(Rejected { line: i + 1, reason }),
            },
            Err(e) => bad.push(Rejected {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    (ok, bad)
}

async fn append_pool(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<PoolUpload>> {
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    with_session(&app, &id, move |s, app| {
        let (parsed, mut rejected) = parse_records(&text);
        let mut seen = std::collections::HashSet::new();
        let mut records = Vec::new();
        for (line, r) in parsed {
            if s.state.pool.contains_key(&r.id) || !seen.insert(r.id.clone()) {
                rejected.push(Rejected {
                    line,
                    reason: format!("duplicate id {}", r.id),
                });
            } else {
                records.push(r);
            }
        }
        rejected.sort_by_key(|r| r.line);
        let accepted = records.len();
        if accepted > 0 {
            s.commit(vec![SessionEvent::PoolAppended { records }], app.store.backend())?;
        }
        Ok(Json(PoolUpload { accepted, rejected }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct AddDemo {
    pub example_id: String,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default = "positive")]
    pub polarity: Polarity,
}

fn positive() -> Polarity {
    Polarity::Positive
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DemoView {
    pub example_id: String,
    pub input: String,
    pub output: String,
    pub polarity: Polarity,
    pub diff_spans: DiffSpans,
}

fn demo_views(state: &SessionState) -> Vec<DemoView> {
    state
        .demonstrations
        .demos
        .iter()
        .map(|d| DemoView {
            example_id: d.example_id.clone(),
            input: d.input.clone(),
            output: d.output.clone(),
            polarity: d.polarity,
            diff_spans: diff_spans(&d.input, &d.output),
        })
        .collect()
}

async fn add_demo(State(app): State<AppState>, Path(id): Path<String>, Json(req): Json<AddDemo>) -> ApiResult<Json<Vec<DemoView>>> {
    with_session(&app, &id, move |s, app| {
        if !s.state.pool.contains_key(&req.example_id) {
            return Err(ApiError::bad_request(format!("unknown example {}", req.example_id)));
        }
        let action = match req.polarity {
            Polarity::Positive => Action::AddedPositive,
            Polarity::Negative => Action::AddedNegative,
        };
        let ev = SessionEvent::Feedback(FeedbackEvent {
            iteration: s.state.iteration,
            example_id: req.example_id,
            action,
            edited_output: req.output,
            timestamp: now_ms(),
        });
        s.commit(vec![ev], app.store.backend())?;
        Ok(Json(demo_views(&s.state)))
    })
    .await
}

async fn list_demos(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<DemoView>>> {
    with_session(&app, &id, |s, _| Ok(Json(demo_views(&s.state)))).await
}

async fn remove_demo(
    State(app): State<AppState>,
    Path((id, example_id)): Path<(String, String)>,
) -> ApiResult<Json<Vec<DemoView>>> {
    with_session(&app, &id, move |s, app| {
        if !s.state.demonstrations.contains_example(&example_id) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("{example_id} is not a demonstration")));
        }
        let ev = SessionEvent::Feedback(FeedbackEvent {
            iteration: s.state.iteration,
            example_id,
            action: Action::Removed,
            edited_output: None,
            timestamp: now_ms(),
        });
        s.commit(vec![ev], app.store.backend())?;
        Ok(Json(demo_views(&s.state)))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct Description {
    pub text: String,
}

async fn edit_description(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<Description>,
) -> ApiResult<StatusCode> {
    with_session(&app, &id, move |s, app| {
        s.commit(vec![SessionEvent::DescriptionEdited { text: req.text }], app.store.backend())?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CandidateView {
    pub example_id: String,
    pub input: String,
    pub draft_output: String,
    pub slice_id: Option<String>,
    pub diff_spans: DiffSpans,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct BatchView {
    pub batch_id: String,
    pub iteration: u32,
    pub candidates: Vec<CandidateView>,
    pub pseudo_labeled: usize,
    pub slice_table: Vec<SliceRow>,
}

fn batch_view(state: &SessionState, b: &ServedBatch) -> BatchView {
    BatchView {
        batch_id: b.batch_id.clone(),
        iteration: b.iteration,
        candidates: b
            .candidates
            .iter()
            .map(|c| {
                let input = state.pool[&c.example_id].input.clone();
                CandidateView {
                    diff_spans: diff_spans(&input, &c.draft_output),
                    example_id: c.example_id.clone(),
                    input,
                    draft_output: c.draft_output.clone(),
                    slice_id: c.slice_id.clone(),
                }
            })
            .collect(),
        pseudo_labeled: b.pseudo_labeled.len(),
        slice_table: b.slice_table.clone(),
    }
}

#[derive(Debug, Deserialize)]
pub struct BatchQuery {
    #[serde(default)]
    pub sampler: Option<SamplerKind>,
}

/// Serves the open batch again if there is one, otherwise runs an iteration.
async fn next_batch(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<BatchQuery>,
) -> ApiResult<Json<BatchView>> {
    with_session(&app, &id, move |s, app| {
        if let Some(open) = &s.state.open_batch {
            return Ok(Json(batch_view(&s.state, open)));
        }
        let mut next = s.state.clone();
        let batch = s
            .engine
            .next_batch(&mut next, q.sampler.unwrap_or(SamplerKind::Slice), None)?;
        s.commit(vec![SessionEvent::BatchServed(batch.clone())], app.store.backend())?;
        Ok(Json(batch_view(&s.state, &batch)))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize, Clone)]
pub struct FeedbackItem {
    pub example_id: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_output: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub batch_id: String,
    #[serde(default)]
    pub items: Vec<FeedbackItem>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct FeedbackSummary {
    pub demo_count: usize,
    pub gate_open: bool,
    pub round_accuracy: f64,
    pub iteration: u32,
}

/// Builds the events for one feedback submission: the listed actions, an
/// implicit NoChange for every untouched candidate, and the round closure.
pub fn feedback_events(state: &SessionState, req: &FeedbackRequest, timestamp: u64) -> ApiResult<Vec<SessionEvent>> {
    let batch = match &state.open_batch {
        Some(b) if b.batch_id == req.batch_id => b,
        _ => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("batch {} is not the open batch", req.batch_id),
            ))
        }
    };
    let in_batch = |id: &str| batch.candidates.iter().any(|c| c.example_id == id);
    for item in &req.items {
        let ex = state
            .pool
            .get(&item.example_id)
            .ok_or_else(|| ApiError::bad_request(format!("unknown example {}", item.example_id)))?;
        let demo_removal = item.action == Action::Removed && ex.status.is_demo();
        if !in_batch(&item.example_id) && !demo_removal {
            return Err(ApiError::bad_request(format!("{} is not in batch {}", item.example_id, batch.batch_id)));
        }
    }
    let mut events: Vec<SessionEvent> = req
        .items
        .iter()
        .map(|item| {
            SessionEvent::Feedback(FeedbackEvent {
                iteration: state.iteration,
                example_id: item.example_id.clone(),
                action: item.action,
                edited_output: item.edited_output.clone(),
                timestamp,
            })
        })
        .collect();
    for c in &batch.candidates {
        if !req.items.iter().any(|i| i.example_id == c.example_id) {
            events.push(SessionEvent::Feedback(FeedbackEvent {
                iteration: state.iteration,
                example_id: c.example_id.clone(),
                action: Action::NoChange,
                edited_output: None,
                timestamp,
            }));
        }
    }
    let fb: Vec<FeedbackEvent> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Feedback(f) => Some(f.clone()),
            _ => None,
        })
        .collect();
    events.push(SessionEvent::RoundClosed {
        batch_id: batch.batch_id.clone(),
        correct_fraction: round_correct_fraction(batch, &fb),
    });
    Ok(events)
}

async fn submit_feedback(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<FeedbackRequest>,
) -> ApiResult<Json<FeedbackSummary>> {
    with_session(&app, &id, move |s, app| {
        let events = feedback_events(&s.state, &req, now_ms())?;
        s.commit(events, app.store.backend())?;
        Ok(Json(FeedbackSummary {
            demo_count: s.state.demonstrations.len(),
            gate_open: s.state.gate_open,
            round_accuracy: s.state.round_accuracies.last().copied().unwrap_or(1.0),
            iteration: s.state.iteration,
        }))
    })
    .await
}

async fn prompt(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<String> {
    with_session(&app, &id, |s, _| {
        let d = &s.state.demonstrations;
        Ok(render_demonstrations(&d.task_description, &d.pairs()))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct StateSummary {
    pub session_id: String,
    pub task_description: String,
    pub iteration: u32,
    pub gate_open: bool,
    pub demo_count: usize,
    pub pool_size: usize,
    pub presented: usize,
    pub pseudo_labeled: usize,
    pub round_accuracies: Vec<f64>,
    pub open_batch_id: Option<String>,
    pub config: SessionConfig,
}

fn summarize(s: &Session) -> StateSummary {
    let st = &s.state;
    StateSummary {
        session_id: s.id.clone(),
        task_description: st.demonstrations.task_description.clone(),
        iteration: st.iteration,
        gate_open: st.gate_open,
        demo_count: st.demonstrations.len(),
        pool_size: st.pool.len(),
        presented: st.presented_count(),
        pseudo_labeled: st.pool.values().filter(|e| e.status == Status::PseudoLabeled).count(),
        round_accuracies: st.round_accuracies.clone(),
        open_batch_id: st.open_batch.as_ref().map(|b| b.batch_id.clone()),
        config: st.config.clone(),
    }
}

async fn summary(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<StateSummary>> {
    with_session(&app, &id, |s, _| Ok(Json(summarize(s)))).await
}

async fn events(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<SessionEvent>>> {
    with_session(&app, &id, |s, _| Ok(Json(s.state.events.clone()))).await
}

async fn evaluate(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<EvalReport>> {
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    with_session(&app, &id, move |s, app| {
        let (records, rejected) = parse_records(&text);
        if let Some(r) = rejected.first() {
            return Err(ApiError::bad_request(format!("line {}: {}", r.line, r.reason)));
        }
        if records.is_empty() {
            return Err(ApiError::bad_request("empty test set"));
        }
        if let Some((line, _)) = records.iter().find(|(_, r)| r.gold_output.is_none()) {
            return Err(ApiError::bad_request(format!("line {line}: missing gold_output")));
        }
        let test: Vec<PoolRecord> = records.into_iter().map(|(_, r)| r).collect();
        // The offline teacher must know the test inputs too.
        let mut known: Vec<PoolRecord> = s
            .state
            .pool
            .values()
            .map(|e| PoolRecord {
                id: e.id.clone(),
                input: e.input.clone(),
                gold_output: e.gold_output.clone(),
                meta: e.meta.clone(),
            })
            .collect();
        known.extend(test.iter().cloned());
        let engine = Engine::new(Lingo::default(), backend_for(&known, app.store.backend())?, RetryPolicy::default());
        Ok(Json(evaluate_test_set(&engine, &s.state, &test)?))
    })
    .await
}
