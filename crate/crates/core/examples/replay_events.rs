//! Rebuilds exam state from the event log: every prefix of the log replays
//! to the state the live store had at that point, and reopening a store on
//! the same storage recovers it.

use std::sync::{Arc, Mutex};

use anyhow::Result;
use examkit::demo;
use examkit::session::{replay, LoginMode, SessionStore, SubmitCause};
use examkit::store::{DocumentStore, MemoryStore};
use examkit::ManualClock;

fn main() -> Result<()> {
    let pool = demo::pool();
    let config = demo::shared_config(&pool);
    let storage: Arc<dyn DocumentStore> = Arc::new(MemoryStore::new());
    let clock = Arc::new(ManualClock::new(demo::at(9, 0)));
    let store = SessionStore::open(config.clone(), &pool, storage.clone(), "demo", clock.clone())?;

    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = seen.clone();
    store.set_recorder(Box::new(move |event, state| {
        sink.lock().unwrap().push((event.payload.kind(), state.clone()))
    }));

    store.authorize_station("s1", &demo::supervisor())?;
    for p in ["p01", "p02"] {
        store.login(p, Some(&demo::credential(p)), LoginMode::Credential, None, "s1")?;
        store.accept_terms(p)?;
        store.store_answer(p, "e3", r#"{"value":100}"#)?;
    }
    store.submit("p01", SubmitCause::Participant)?;

    let events = store.events();
    for (n, (kind, live)) in seen.lock().unwrap().iter().enumerate() {
        let replayed = replay(&config, &events, n as u64 + 1)?;
        assert_eq!(&replayed, live);
        println!(
            "{:>2} {kind:<18} submitted={}",
            n + 1,
            replayed.count_in(examkit::session::SessionState::Submitted)
        );
    }

    drop(store);
    let reopened = SessionStore::open(config, &pool, storage, "demo", clock)?;
    println!(
        "reopened with {} events; p02 is {:?}",
        reopened.last_seq(),
        reopened.session("p02")?.state
    );
    Ok(())
}
