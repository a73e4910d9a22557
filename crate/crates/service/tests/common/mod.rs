//! Random session driver shared by the persistence and acceptance tests.

use curata::engine::SamplerKind;
use curata::session::{Action, FeedbackEvent, PoolRecord, SessionEvent, Status};
use curata::sim::{generate_synthetic_pool, PoolSpec};
use curata_service::api::{feedback_events, FeedbackItem, FeedbackRequest};
use curata_service::store::{lock, Store};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Drives session `id` with random accepted requests until its log holds at
/// least `min_events` events. Rejected requests leave the state untouched
/// and are simply skipped, as a client would.
pub fn drive_random_session(store: &Store, id: &str, seed: u64, min_events: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pool, _) = generate_synthetic_pool(
        &PoolSpec {
            pool_size: 300,
            test_size: 10,
            ..PoolSpec::default()
        },
        seed,
    )
    .unwrap();
    // Ids are namespaced so repeated drives of one session append fresh records.
    let pool: Vec<PoolRecord> = pool
        .into_iter()
        .map(|r| PoolRecord {
            id: format!("s{seed}-{}", r.id),
            ..r
        })
        .collect();
    let mut chunks = pool.chunks(60);
    let session = store.get(id).unwrap();
    let backend = store.backend().clone();
    let mut ts = 0u64;
    let mut guard = lock(&session);
    guard
        .commit(
            vec![SessionEvent::PoolAppended {
                records: chunks.next().unwrap().to_vec(),
            }],
            &backend,
        )
        .unwrap();
    while guard.state.events.len() < min_events {
        ts += 1;
        let state = &guard.state;
        let ids: Vec<String> = state.pool.keys().cloned().collect();
        let events: Vec<SessionEvent> = if let Some(batch) = &state.open_batch {
            let items: Vec<FeedbackItem> = batch
                .candidates
                .iter()
                .filter_map(|c| {
                    let action = *[
                        Action::NoChange,
                        Action::NoChange,
                        Action::EditedOutput,
                        Action::Skipped,
                        Action::AddedPositive,
                        Action::AddedNegative,
                    ]
                    .choose(&mut rng)
                    .unwrap();
                    if action == Action::NoChange {
                        return None;
                    }
                    let edited = (action == Action::EditedOutput || rng.random_bool(0.3))
                        .then(|| format!("{} (edited {ts})", c.draft_output));
                    Some(FeedbackItem {
                        example_id: c.example_id.clone(),
                        action,
                        edited_output: edited,
                    })
                })
                .collect();
            let req = FeedbackRequest {
                batch_id: batch.batch_id.clone(),
                items,
            };
            match feedback_events(state, &req, ts) {
                Ok(evs) => evs,
                Err(_) => continue,
            }
        } else {
            match rng.random_range(0..10) {
                0..=2 => {
                    let id = ids.choose(&mut rng).unwrap();
                    let action = if rng.random_bool(0.8) {
                        Action::AddedPositive
                    } else {
                        Action::AddedNegative
                    };
                    vec![feedback(state.iteration, id, action, ts)]
                }
                3 => match state.demonstrations.demos.choose(&mut rng) {
                    Some(d) => vec![feedback(state.iteration, &d.example_id, Action::Removed, ts)],
                    None => continue,
                },
                4 => vec![SessionEvent::DescriptionEdited {
                    text: format!("Extract dates, revision {ts}."),
                }],
                5 => match chunks.next() {
                    Some(c) => vec![SessionEvent::PoolAppended { records: c.to_vec() }],
                    None => continue,
                },
                _ => {
                    let mut next = state.clone();
                    let sampler = if rng.random_bool(0.7) {
                        SamplerKind::Slice
                    } else {
                        SamplerKind::Random
                    };
                    match guard.engine.next_batch(&mut next, sampler, None) {
                        Ok(b) => vec![SessionEvent::BatchServed(b)],
                        Err(_) => continue,
                    }
                }
            }
        };
        let _ = guard.commit(events, &backend);
    }
    let statuses: std::collections::HashSet<Status> = guard.state.pool.values().map(|e| e.status).collect();
    assert!(statuses.len() >= 3, "driver should exercise several statuses");
}

fn feedback(iteration: u32, id: &str, action: Action, timestamp: u64) -> SessionEvent {
    SessionEvent::Feedback(FeedbackEvent {
        iteration,
        example_id: id.to_string(),
        action,
        edited_output: None,
        timestamp,
    })
}

#[allow(dead_code)]
pub fn jsonl(records: &[PoolRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}
