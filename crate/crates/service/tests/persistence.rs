mod common;

use std::fs::OpenOptions;
use std::io::Write;

use curata::session::{SessionConfig, SessionState};
use curata_service::store::{lock, read_events, BackendSetting, Store};

#[test]
fn restart_reproduces_state() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let store = Store::open(dir.path(), BackendSetting::Mock).unwrap();
        let id = store.create("Extract dates.", SessionConfig::default(), 11).unwrap();
        common::drive_random_session(&store, &id, 11, 200);
        let s = store.get(&id).unwrap();
        let state = lock(&s).state.clone();
        (id, state)
    };
    let (id, state) = before;
    assert!(state.events.len() >= 200);

    let store = Store::open(dir.path(), BackendSetting::Mock).unwrap();
    let s = store.get(&id).unwrap();
    assert_eq!(lock(&s).state, state);

    let log = dir.path().join("sessions").join(&id).join("events.jsonl");
    let replayed = SessionState::replay(&read_events(&log).unwrap()).unwrap();
    assert_eq!(replayed, state);
    let snapshot: SessionState =
        serde_json::from_str(&std::fs::read_to_string(log.with_file_name("state.json")).unwrap()).unwrap();
    assert_eq!(snapshot, state);
}

#[test]
fn torn_tail_is_dropped_and_appends_continue() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), BackendSetting::Mock).unwrap();
    let id = store.create("Extract dates.", SessionConfig::default(), 5).unwrap();
    common::drive_random_session(&store, &id, 5, 40);
    let state = lock(&store.get(&id).unwrap()).state.clone();
    drop(store);

    let log = dir.path().join("sessions").join(&id).join("events.jsonl");
    OpenOptions::new()
        .append(true)
        .open(&log)
        .unwrap()
        .write_all(br#"{"type":"DescriptionEd"#)
        .unwrap();

    let store = Store::open(dir.path(), BackendSetting::Mock).unwrap();
    let s = store.get(&id).unwrap();
    assert_eq!(lock(&s).state, state);
    common::drive_random_session(&store, &id, 6, 60);
    let after = lock(&s).state.clone();
    drop(store);
    let replayed = SessionState::replay(&read_events(&log).unwrap()).unwrap();
    assert_eq!(replayed, after);
}

#[test]
fn corrupt_middle_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), BackendSetting::Mock).unwrap();
    let id = store.create("t", SessionConfig::default(), 1).unwrap();
    drop(store);
    let log = dir.path().join("sessions").join(&id).join("events.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    std::fs::write(&log, format!("garbage\n{text}")).unwrap();
    assert!(Store::open(dir.path(), BackendSetting::Mock).is_err());
}
