//! On-disk sessions: `sessions/{id}/events.jsonl` is the append-only source of
//! truth, `state.json` a snapshot rewritten atomically after each change.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use curata::engine::Engine;
use curata::lingo::Lingo;
use curata::llmfn::http::{HttpBackend, HttpBackendConfig};
use curata::llmfn::mock::MockTeacher;
use curata::llmfn::{Backend, RetryPolicy};
use curata::session::{PoolRecord, SessionConfig, SessionError, SessionEvent, SessionState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt session {id}: {reason}")]
    Corrupt { id: String, reason: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("backend setup failed: {0}")]
    Backend(String),
}

/// Which completion backend sessions talk to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSetting {
    /// Offline teacher answering from the session pool's hidden families.
    Mock,
    Http(HttpBackendConfig),
}

pub struct Session {
    pub id: String,
    pub state: SessionState,
    pub engine: Engine,
    log: File,
    dir: PathBuf,
}

impl Session {
    /// Validates `events` against a copy of the state, then appends them to
    /// the log and installs the new state. Nothing changes on error.
    pub fn commit(&mut self, events: Vec<SessionEvent>, backend: &BackendSetting) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let mut next = self.state.clone();
        for ev in &events {
            next.apply(ev.clone())?;
        }
        let mut buf = String::new();
        for ev in &events {
            buf.push_str(&serde_json::to_string(ev).expect("events serialize"));
            buf.push('\n');
        }
        self.log.write_all(buf.as_bytes())?;
        self.log.sync_data()?;
        let pool_changed = events.iter().any(|e| matches!(e, SessionEvent::PoolAppended { .. }));
        self.state = next;
        if pool_changed {
            self.engine = build_engine(&self.state, backend)?;
        }
        write_snapshot(&self.dir, &self.state)?;
        Ok(())
    }
}

pub fn backend_for(records: &[PoolRecord], setting: &BackendSetting) -> Result<Arc<dyn Backend>, StoreError> {
    Ok(match setting {
        BackendSetting::Mock => Arc::new(MockTeacher::new(records)),
        BackendSetting::Http(cfg) => {
            Arc::new(HttpBackend::new(cfg.clone()).map_err(|e| StoreError::Backend(e.to_string()))?)
        }
    })
}

fn pool_records(state: &SessionState) -> Vec<PoolRecord> {
    state
        .pool
        .values()
        .map(|e| PoolRecord {
            id: e.id.clone(),
            input: e.input.clone(),
            gold_output: e.gold_output.clone(),
            meta: e.meta.clone(),
        })
        .collect()
}

fn build_engine(state: &SessionState, setting: &BackendSetting) -> Result<Engine, StoreError> {
    let backend = backend_for(&pool_records(state), setting)?;
    Ok(Engine::new(Lingo::default(), backend, RetryPolicy::default()))
}

fn write_snapshot(dir: &Path, state: &SessionState) -> Result<(), StoreError> {
    let tmp = dir.join("state.json.tmp");
    {
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, state).map_err(std::io::Error::other)?;
        f.sync_all()?;
    }
    fs::rename(tmp, dir.join("state.json"))?;
    Ok(())
}

/// Reads a session's event log. A torn final line (crash mid-append) is
/// dropped; any other unreadable line is corruption.
pub fn read_events(path: &Path) -> Result<Vec<SessionEvent>, StoreError> {
    let id = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            Err(_) if i + 1 == lines.len() => {
                tracing::warn!(session = %id, "dropping torn trailing log line");
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    id,
                    reason: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(events)
}

pub struct Store {
    root: PathBuf,
    backend: BackendSetting,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
}

impl Store {
    /// Opens `data_dir`, replaying every session log found under it.
    pub fn open(data_dir: impl Into<PathBuf>, backend: BackendSetting) -> Result<Self, StoreError> {
        let root = data_dir.into().join("sessions");
        fs::create_dir_all(&root)?;
        let mut sessions = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let dir = entry?.path();
            let log_path = dir.join("events.jsonl");
            if !log_path.is_file() {
                continue;
            }
            let id = dir.file_name().unwrap().to_string_lossy().into_owned();
            let events = read_events(&log_path)?;
            let state = SessionState::replay(&events).map_err(|e| StoreError::Corrupt {
                id: id.clone(),
                reason: e.to_string(),
            })?;
            // Rewrite the log when a torn tail was dropped so appends stay aligned.
            let mut raw = String::new();
            for ev in &events {
                raw.push_str(&serde_json::to_string(ev).expect("events serialize"));
                raw.push('\n');
            }
            if fs::read_to_string(&log_path)? != raw {
                fs::write(&log_path, raw)?;
            }
            write_snapshot(&dir, &state)?;
            let session = Session {
                engine: build_engine(&state, &backend)?,
                log: OpenOptions::new().append(true).open(&log_path)?,
                id: id.clone(),
                state,
                dir,
            };
            sessions.insert(id, Arc::new(Mutex::new(session)));
        }
        tracing::info!(count = sessions.len(), root = %root.display(), "sessions loaded");
        Ok(Store {
            root,
            backend,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn backend(&self) -> &BackendSetting {
        &self.backend
    }

    pub fn create(&self, task_description: &str, config: SessionConfig, rng_seed: u64) -> Result<String, StoreError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        fs::create_dir_all(&dir)?;
        let state = SessionState::new(task_description, config, rng_seed);
        let log_path = dir.join("events.jsonl");
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        for ev in &state.events {
            writeln!(log, "{}", serde_json::to_string(ev).expect("events serialize"))?;
        }
        log.sync_data()?;
        write_snapshot(&dir, &state)?;
        let session = Session {
            engine: build_engine(&state, &self.backend)?,
            id: id.clone(),
            state,
            log,
            dir,
        };
        self.sessions
            .write()
            .unwrap()
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }
}

/// Locks a session, recovering from a poisoned lock: state only changes
/// through `commit`, which is all-or-nothing.
pub fn lock(session: &Mutex<Session>) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|e| e.into_inner())
}
