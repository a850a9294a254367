//! From submitted answers to released reports: automatic evaluation in the
//! sandbox, a manual score, a bonus import, clearing and e-mail delivery to
//! a file outbox. Needs a C compiler on the host.

use std::sync::Arc;

use anyhow::Result;
use examkit::demo;
use examkit::grading::{parse_bonus_csv, FileOutbox, Grader};
use examkit::sandbox::SandboxService;
use examkit::session::{DistributionMode, LoginMode, SessionStore, SubmitCause};
use examkit::store::MemoryStore;
use examkit::{ManualClock, Points};

fn main() -> Result<()> {
    let pool = demo::pool();
    let clock = Arc::new(ManualClock::new(demo::at(9, 0)));
    let session = Arc::new(SessionStore::open(
        demo::shared_config(&pool),
        &pool,
        Arc::new(MemoryStore::new()),
        "demo",
        clock,
    )?);
    let sandbox = Arc::new(SandboxService::start(demo::sandbox_config())?);
    let grader = Grader::new(session.clone(), Some(sandbox));
    let admin = demo::admin();

    session.authorize_station("s1", &demo::supervisor())?;
    let participants: Vec<String> = session
        .config()
        .roster
        .iter()
        .map(|e| e.participant_id.clone())
        .collect();
    for p in &participants {
        session.login(p, Some(&demo::credential(p)), LoginMode::Credential, None, "s1")?;
        session.accept_terms(p)?;
    }
    let program = serde_json::json!({"files": {"main.c": demo::reference_solution()}}).to_string();
    session.store_answer("p01", "e5", &program)?;
    session.store_answer("p01", "e4", r#"{"text":"open addressing"}"#)?;
    for p in &participants {
        session.submit(p, SubmitCause::Participant)?;
    }

    let book = grader.evaluate_exam(&admin, false)?;
    println!(
        "evaluated {} participants, {} manual slots open",
        book.entries.len(),
        book.blocking_slots().len()
    );
    for p in &participants {
        grader.set_manual_score(
            p,
            "e4",
            Points::whole(if p == "p01" { 8 } else { 0 }),
            "reviewed",
            &admin,
        )?;
    }
    grader.import_bonus(
        &parse_bonus_csv("participant_id,points,note\np01,2,lab work\n").map_err(anyhow::Error::msg)?,
        &admin,
    )?;
    let entry = grader.gradebook()?.entry("p01").cloned().expect("on the roster");
    println!("p01: {} points, grade {}", entry.total, entry.grade_label);

    grader.clear_and_release(&admin)?;
    let outbox_dir = tempfile::tempdir()?;
    let outbox = FileOutbox::new(outbox_dir.path())?;
    let log = grader.distribute(DistributionMode::Email, Some(&outbox), &admin)?;
    println!(
        "delivered {} reports, {} failures",
        log.delivered.len(),
        log.failed.len()
    );
    let report = grader.download_report("p01")?.render();
    println!(
        "{}",
        report.split(examkit::grading::PAGE_BREAK).next().unwrap_or_default()
    );
    Ok(())
}
