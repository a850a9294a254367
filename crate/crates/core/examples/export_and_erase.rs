//! End of an exam's life: export everything to an archive directory, then
//! erase it from storage. Erasing before a fresh export is refused.

use std::sync::Arc;

use anyhow::Result;
use examkit::demo;
use examkit::grading::Grader;
use examkit::session::{ExportArchive, LoginMode, SessionStore, SubmitCause};
use examkit::store::{DocumentStore, MemoryStore};
use examkit::ManualClock;

fn main() -> Result<()> {
    let pool = demo::pool();
    let storage = Arc::new(MemoryStore::new());
    let clock = Arc::new(ManualClock::new(demo::at(9, 0)));
    let session = Arc::new(SessionStore::open(
        demo::shared_config(&pool),
        &pool,
        storage.clone(),
        "demo",
        clock,
    )?);
    session.authorize_station("s1", &demo::supervisor())?;
    session.login("p02", Some(&demo::credential("p02")), LoginMode::Credential, None, "s1")?;
    session.accept_terms("p02")?;
    session.store_answer("p02", "e4", r#"{"text":"a short essay"}"#)?;
    session.submit("p02", SubmitCause::Participant)?;

    if let Err(e) = session.erase_all(true) {
        println!("erase before export: {e}");
    }

    let grader = Grader::new(session.clone(), None);
    let dir = tempfile::tempdir()?;
    let archive = session.export_all(dir.path(), &grader.export_extras("live", "demo-v1"))?;
    let reopened = ExportArchive::open(&archive.dir)?;
    println!(
        "exported {} events, {} answer revisions, trial={}",
        reopened.events()?.len(),
        reopened.manifest.answer_revisions,
        reopened.manifest.trial
    );

    session.erase_all(true)?;
    println!("erased; storage now holds {} bytes", storage.raw_contents()?.len());
    Ok(())
}
