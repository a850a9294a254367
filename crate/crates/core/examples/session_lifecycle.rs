//! One participant through an exam: station authorization, login, terms,
//! answers, a time extension and the deadline sweep.

use std::sync::Arc;

use anyhow::Result;
use chrono::Duration;
use examkit::demo;
use examkit::session::{LoginMode, SessionStore};
use examkit::store::MemoryStore;
use examkit::ManualClock;

fn main() -> Result<()> {
    let pool = demo::pool();
    let clock = Arc::new(ManualClock::new(demo::at(9, 0)));
    let store = SessionStore::open(
        demo::shared_config(&pool),
        &pool,
        Arc::new(MemoryStore::new()),
        "demo",
        clock.clone(),
    )?;
    let sup = demo::supervisor();

    store.authorize_station("lab-3", &sup)?;
    store.login(
        "p01",
        Some(&demo::credential("p01")),
        LoginMode::Credential,
        None,
        "lab-3",
    )?;
    let record = store.accept_terms("p01")?;
    println!(
        "p01 {:?}, exercises {:?}, deadline {}",
        record.state,
        record.exercises,
        store.deadline("p01")?
    );

    let revision = store.store_answer("p01", "e4", r#"{"text":"first draft"}"#)?;
    store.store_answer("p01", "e4", r#"{"text":"second draft"}"#)?;
    println!("e4 stored up to revision {}", revision + 1);

    store.extend_time("p01", 5, &sup)?;
    println!("after a 5 minute extension: deadline {}", store.deadline("p01")?);

    clock.advance(Duration::minutes(12));
    println!("12 minutes in, sweep submits {:?}", store.sweep()?);
    clock.advance(Duration::minutes(4));
    println!("16 minutes in, sweep submits {:?}", store.sweep()?);
    match store.store_answer("p01", "e4", r#"{"text":"too late"}"#) {
        Ok(_) => println!("late write accepted?"),
        Err(e) => println!("late write refused: {e}"),
    }
    println!("{} events in the log", store.last_seq());
    Ok(())
}
