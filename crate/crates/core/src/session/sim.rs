//! Random operation sequences against a session store, with the state
//! machine invariants checked after every step.

use std::sync::Arc;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::clock::ManualClock;
use crate::store::MemoryStore;

const STATION: &str = "station-1";
const EXERCISES: [&str; 5] = ["e1", "e2", "e3", "e4", "e5"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Authorize,
    Login(usize),
    BadLogin(usize),
    Bypass(usize),
    Accept(usize),
    Store(usize, usize),
    Load(usize, usize),
    Submit(usize),
    Extend(usize, u32),
    Identity(usize),
    Advance(i64),
    Sweep,
}

/// A reproducible sequence of `len` operations over `participants` roster
/// entries (at most 4).
pub fn random_sequence(seed: u64, len: usize, participants: usize) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = participants.clamp(1, 4);
    (0..len)
        .map(|_| {
            let p = rng.random_range(0..n);
            match rng.random_range(0..12) {
                0 => Op::Authorize,
                1 => Op::Login(p),
                2 => Op::BadLogin(p),
                3 => Op::Bypass(p),
                4 => Op::Accept(p),
                5 | 6 => Op::Store(p, rng.random_range(0..EXERCISES.len())),
                7 => Op::Load(p, rng.random_range(0..EXERCISES.len())),
                8 => Op::Submit(p),
                9 => Op::Extend(p, rng.random_range(0..4)),
                10 => Op::Identity(p),
                _ if rng.random_bool(0.7) => Op::Advance(rng.random_range(0..400)),
                _ => Op::Sweep,
            }
        })
        .collect()
}

/// Runs `ops` against a fresh in-memory session store for `config` and checks
/// after every step that state changes follow declared edges and that
/// submitted sessions keep their state, submission, exercises and answers.
/// No session may rest in `terms_accepted`. At the end it checks that no
/// answer is later than its session's last write time, that revisions are
/// gap-free and that replaying the log reproduces the live state.
pub fn check_sequence(config: &Arc<ExamConfig>, pool: &ExercisePool, ops: &[Op]) -> Result<(), String> {
    let clock = ManualClock::new(crate::demo::at(10, 0));
    let store = SessionStore::open(
        config.clone(),
        pool,
        Arc::new(MemoryStore::new()),
        "sim",
        Arc::new(clock.clone()),
    )
    .map_err(|e| e.to_string())?;
    let supervisor = Principal::new("sim-supervisor", AccessLevel::Supervisor);
    let ids: Vec<String> = config.roster.iter().take(4).map(|p| p.participant_id.clone()).collect();
    if ids.is_empty() {
        return Err("roster is empty".into());
    }
    let id = |i: usize| ids[i % ids.len()].as_str();

    let mut previous = store.snapshot();
    for op in ops {
        let _ = match op {
            Op::Authorize => store.authorize_station(STATION, &supervisor).map(drop),
            Op::Login(i) => store
                .login(
                    id(*i),
                    Some(&crate::demo::credential(id(*i))),
                    LoginMode::Credential,
                    None,
                    STATION,
                )
                .map(drop),
            Op::BadLogin(i) => store
                .login(id(*i), Some("wrong"), LoginMode::Credential, None, STATION)
                .map(drop),
            Op::Bypass(i) => store
                .login(id(*i), None, LoginMode::SupervisorBypass, Some(&supervisor), STATION)
                .map(drop),
            Op::Accept(i) => store.accept_terms(id(*i)).map(drop),
            Op::Store(i, e) => store.store_answer(id(*i), EXERCISES[*e], r#"{"x": 1}"#).map(drop),
            Op::Load(i, e) => store.load_answer(id(*i), EXERCISES[*e]).map(drop),
            Op::Submit(i) => store.submit(id(*i), SubmitCause::Participant).map(drop),
            Op::Extend(i, m) => store.extend_time(id(*i), *m, &supervisor).map(drop),
            Op::Identity(i) => store.mark_identity_checked(id(*i), &supervisor).map(drop),
            Op::Advance(s) => {
                clock.advance(Duration::seconds(*s));
                Ok(())
            }
            Op::Sweep => store.sweep().map(drop),
        };
        let state = store.snapshot();
        for (pid, now) in &state.sessions {
            let before = &previous.sessions[pid];
            if before.state != now.state && !before.state.can_move_to(now.state) {
                return Err(format!("{op:?}: {pid} moved {} -> {}", before.state, now.state));
            }
            let frozen = |s: &ExamState| (s.sessions[pid].exercises.clone(), s.answers.get(pid).cloned());
            if before.state == SessionState::Submitted
                && (now.state != before.state
                    || now.submission != before.submission
                    || frozen(&previous) != frozen(&state))
            {
                return Err(format!("{op:?}: submitted session {pid} changed"));
            }
            if now.state == SessionState::TermsAccepted {
                return Err(format!("{op:?}: {pid} rests in terms_accepted"));
            }
            if now.state == SessionState::InProgress && now.effective_start.is_none() {
                return Err(format!("{op:?}: {pid} in progress without a start"));
            }
        }
        previous = state;
    }

    for event in store.events() {
        if let (EventPayload::AnswerStored { .. }, Some(p)) = (&event.payload, &event.session) {
            let record = &previous.sessions[p];
            let deadline = config
                .timing
                .deadline(record.effective_start, record.extensions)
                .map_err(|e| e.to_string())?;
            if event.at > config.timing.last_write(deadline) {
                return Err(format!("answer of {p} stored at {} past deadline and grace", event.at));
            }
        }
    }
    for (p, exercises) in &previous.answers {
        for (e, docs) in exercises {
            if docs.iter().enumerate().any(|(i, d)| d.revision as usize != i + 1) {
                return Err(format!("{p}/{e}: revisions are not 1, 2, 3, ..."));
            }
        }
    }
    let replayed = replay(config, &store.events(), previous.last_seq).map_err(|e| e.to_string())?;
    if replayed != previous {
        return Err("replay differs from the live state".into());
    }
    Ok(())
}
