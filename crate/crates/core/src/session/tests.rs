use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use chrono::Duration;
use proptest::prelude::*;

use super::*;
use crate::clock::ManualClock;
use crate::config::StartMode;
use crate::demo;
use crate::store::MemoryStore;

struct Fixture {
    store: SessionStore,
    clock: ManualClock,
    backend: Arc<MemoryStore>,
    pool: ExercisePool,
}

fn fixture_with(edit: impl FnOnce(&mut ExamConfig)) -> Fixture {
    let pool = demo::pool();
    let mut config = demo::config(&pool);
    edit(&mut config);
    let clock = ManualClock::new(demo::at(9, 50));
    let backend = Arc::new(MemoryStore::new());
    let store = SessionStore::open(
        Arc::new(config),
        &pool,
        backend.clone(),
        "demo-1",
        Arc::new(clock.clone()),
    )
    .unwrap();
    Fixture {
        store,
        clock,
        backend,
        pool,
    }
}

fn fixture() -> Fixture {
    fixture_with(|_| {})
}

fn start(f: &Fixture, participant: &str) {
    if f.store.station("room1-pc07").is_none() {
        f.store.authorize_station("room1-pc07", &demo::supervisor()).unwrap();
    }
    f.store
        .login(
            participant,
            Some(&demo::credential(participant)),
            LoginMode::Credential,
            None,
            "room1-pc07",
        )
        .unwrap();
    f.store.accept_terms(participant).unwrap();
}

fn participant_principal(id: &str) -> Principal {
    Principal::new(id, AccessLevel::Participant)
}

#[test]
fn authorize_station_requires_supervisor_and_is_idempotent() {
    let f = fixture();
    let record = f.store.authorize_station("room1-pc07", &demo::admin()).unwrap();
    assert!(record.authorized);
    assert_eq!(record.authorized_by, "admin1");
    assert!(matches!(
        f.store.authorize_station("room1-pc07", &participant_principal("p01")),
        Err(SessionError::Access(_))
    ));
    f.store.authorize_station("room1-pc07", &demo::supervisor()).unwrap();
    assert_eq!(f.store.events().len(), 2);
}

#[test]
fn login_paths() {
    let f = fixture();
    assert!(matches!(
        f.store
            .login("p01", Some("pw-p01"), LoginMode::Credential, None, "room1-pc07"),
        Err(SessionError::StationNotAuthorized(_))
    ));
    f.store.authorize_station("room1-pc07", &demo::supervisor()).unwrap();
    let s = f
        .store
        .login("p01", Some("pw-p01"), LoginMode::Credential, None, "room1-pc07")
        .unwrap();
    assert_eq!(s.state, SessionState::LoggedIn);
    assert_eq!(s.login_mode, Some(LoginMode::Credential));
    assert!(matches!(
        f.store
            .login("p02", Some("wrong"), LoginMode::Credential, None, "room1-pc07"),
        Err(SessionError::BadCredential)
    ));
    assert!(matches!(
        f.store
            .login("nobody", Some("x"), LoginMode::Credential, None, "room1-pc07"),
        Err(SessionError::UnknownParticipant(_))
    ));
    let s = f
        .store
        .login(
            "p02",
            None,
            LoginMode::SupervisorBypass,
            Some(&demo::supervisor()),
            "room1-pc07",
        )
        .unwrap();
    assert_eq!(s.login_mode, Some(LoginMode::SupervisorBypass));
    assert!(matches!(
        f.store.login(
            "p03",
            None,
            LoginMode::SupervisorBypass,
            Some(&participant_principal("p01")),
            "room1-pc07"
        ),
        Err(SessionError::Access(_))
    ));
}

#[test]
fn accept_terms_per_acceptance_sets_start() {
    let f = fixture();
    f.clock.set(demo::at(10, 7));
    start(&f, "p01");
    let s = f.store.session("p01").unwrap();
    assert_eq!(s.state, SessionState::InProgress);
    assert_eq!(s.effective_start, Some(demo::at(10, 7)));
    assert!(matches!(
        f.store.accept_terms("p01"),
        Err(SessionError::WrongState { .. })
    ));
}

#[test]
fn early_acceptance_waits_for_global_start() {
    let f = fixture_with(|c| c.timing.start_mode = StartMode::Global(demo::at(10, 0)));
    f.clock.set(demo::at(9, 55));
    start(&f, "p01");
    assert_eq!(f.store.session("p01").unwrap().effective_start, Some(demo::at(10, 0)));
    assert!(matches!(
        f.store.store_answer("p01", "e1", "{}"),
        Err(SessionError::NotStarted { .. })
    ));
    f.clock.set(demo::at(10, 1));
    assert_eq!(f.store.store_answer("p01", "e1", "{}").unwrap(), 1);
}

#[test]
fn answers_are_revisioned_and_byte_identical() {
    let f = fixture();
    start(&f, "p01");
    assert_eq!(f.store.load_answer("p01", "e3").unwrap(), None);
    let b1 = r#"{ "value" : 1.50 ,"note":"keep  spacing"}"#;
    let b2 = r#"{"value": 2}"#;
    assert_eq!(f.store.store_answer("p01", "e3", b1).unwrap(), 1);
    assert_eq!(f.store.load_answer("p01", "e3").unwrap().unwrap().body, b1);
    assert_eq!(f.store.store_answer("p01", "e3", b2).unwrap(), 2);
    assert_eq!(f.store.load_answer("p01", "e3").unwrap().unwrap().body, b2);
    let revisions = f.store.snapshot().revisions("p01", "e3").to_vec();
    assert_eq!(revisions.iter().map(|r| r.revision).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(revisions[0].body, b1);
    assert!(matches!(
        f.store.store_answer("p01", "e9", "{}"),
        Err(SessionError::UnknownExercise(_))
    ));
    assert!(matches!(
        f.store.store_answer("p01", "e3", "not json"),
        Err(SessionError::InvalidBody(_))
    ));
}

#[test]
fn grace_boundary_is_enforced() {
    let f = fixture();
    f.clock.set(demo::at(10, 0));
    start(&f, "p01");
    // 10 minutes plus 30 seconds grace
    f.clock.set(demo::at(10, 10) + Duration::seconds(30));
    assert!(f.store.store_answer("p01", "e1", "{}").is_ok());
    f.clock.advance(Duration::seconds(1));
    assert!(matches!(
        f.store.store_answer("p01", "e1", "{}"),
        Err(SessionError::AfterDeadline { .. })
    ));
}

#[test]
fn submit_is_terminal() {
    let f = fixture();
    f.clock.set(demo::at(10, 0));
    start(&f, "p01");
    let s = f.store.submit("p01", SubmitCause::Participant).unwrap();
    assert_eq!(s.state, SessionState::Submitted);
    assert_eq!(s.submission.unwrap().cause, SubmitCause::Participant);
    let before = f.store.snapshot();
    assert!(matches!(
        f.store.submit("p01", SubmitCause::Participant),
        Err(SessionError::WrongState { .. })
    ));
    assert!(matches!(
        f.store.store_answer("p01", "e1", "{}"),
        Err(SessionError::WrongState { .. })
    ));
    assert!(matches!(
        f.store
            .login("p01", Some("pw-p01"), LoginMode::Credential, None, "room1-pc07"),
        Err(SessionError::WrongState { .. })
    ));
    assert_eq!(f.store.snapshot(), before);
}

#[test]
fn sweep_submits_at_the_deadline() {
    let f = fixture_with(|c| {
        c.timing.start_mode = StartMode::Global(demo::at(10, 0));
        c.timing.duration_minutes = 90;
        c.timing.grace_seconds = 0;
    });
    for p in ["p01", "p02", "p03"] {
        start(&f, p);
    }
    f.clock.set(demo::at(11, 10));
    f.store.submit("p03", SubmitCause::Participant).unwrap();
    f.clock.set(demo::at(11, 29));
    assert!(f.store.sweep().unwrap().is_empty());
    f.clock.set(demo::at(11, 30));
    assert_eq!(f.store.sweep().unwrap(), vec!["p01", "p02"]);
    let state = f.store.snapshot();
    assert_eq!(
        state.sessions["p01"].submission.as_ref().unwrap().cause,
        SubmitCause::Deadline
    );
    assert_eq!(state.count_in(SessionState::InProgress), 0);
}

#[test]
fn extensions_add_up_and_need_supervisor() {
    let f = fixture();
    f.clock.set(demo::at(10, 7));
    start(&f, "p01");
    assert_eq!(f.store.deadline("p01").unwrap(), demo::at(10, 17));
    f.store.extend_time("p01", 10, &demo::supervisor()).unwrap();
    f.store.extend_time("p01", 5, &demo::supervisor()).unwrap();
    assert_eq!(f.store.session("p01").unwrap().extensions, 15);
    assert_eq!(f.store.deadline("p01").unwrap(), demo::at(10, 32));
    assert!(matches!(
        f.store.extend_time("p01", 5, &participant_principal("p01")),
        Err(SessionError::Access(_))
    ));
    f.store.submit("p01", SubmitCause::Participant).unwrap();
    assert!(matches!(
        f.store.extend_time("p01", 5, &demo::supervisor()),
        Err(SessionError::WrongState { .. })
    ));
}

#[test]
fn identity_check_is_idempotent() {
    let f = fixture();
    assert!(
        f.store
            .mark_identity_checked("p01", &demo::supervisor())
            .unwrap()
            .identity_checked
    );
    assert!(
        f.store
            .mark_identity_checked("p01", &demo::supervisor())
            .unwrap()
            .identity_checked
    );
    assert!(matches!(
        f.store.mark_identity_checked("p01", &participant_principal("p01")),
        Err(SessionError::Access(_))
    ));
    assert_eq!(f.store.events().len(), 2);
}

#[test]
fn live_exercise_addition_skips_submitted_sessions() {
    let f = fixture();
    start(&f, "p01");
    start(&f, "p02");
    f.store.submit("p02", SubmitCause::Participant).unwrap();
    let e6 = f.pool.get("e6").unwrap().clone();
    assert!(matches!(
        f.store.add_exercise_live(e6.clone(), &demo::supervisor()),
        Err(SessionError::Access(_))
    ));
    f.store.add_exercise_live(e6.clone(), &demo::admin()).unwrap();
    let state = f.store.snapshot();
    assert_eq!(state.sessions["p01"].exercises.len(), 6);
    assert_eq!(state.sessions["p02"].exercises.len(), 5);
    assert_eq!(state.sessions["p03"].exercises.len(), 6);
    assert!(matches!(
        f.store.add_exercise_live(e6, &demo::admin()),
        Err(SessionError::DuplicateExercise(_))
    ));
    assert_eq!(f.store.store_answer("p01", "e6", r#"{"value": 1024}"#).unwrap(), 1);
}

#[test]
fn replay_matches_recorded_snapshots() {
    let f = fixture();
    let recorded: Arc<Mutex<BTreeMap<u64, ExamState>>> = Arc::default();
    let sink = recorded.clone();
    f.store.set_recorder(Box::new(move |event, state| {
        sink.lock().unwrap().insert(event.seq, state.clone());
    }));
    start(&f, "p01");
    f.store.store_answer("p01", "e1", r#"{"selected":["a"]}"#).unwrap();
    f.store.store_answer("p01", "e1", r#"{"selected":["a","c"]}"#).unwrap();
    f.store.extend_time("p01", 5, &demo::supervisor()).unwrap();
    f.store.submit("p01", SubmitCause::Participant).unwrap();

    let events = f.store.events();
    let recorded = recorded.lock().unwrap();
    assert_eq!(recorded.len(), events.len());
    for k in 0..=events.len() as u64 {
        let state = replay(f.store.config(), &events, k).unwrap();
        if k > 0 {
            assert_eq!(state, recorded[&k], "prefix {k}");
        }
    }
    assert_eq!(
        replay(f.store.config(), &events, events.len() as u64).unwrap(),
        f.store.snapshot()
    );

    // prefix semantics: the state before the second answer lacks revision 2
    let k = events
        .iter()
        .find(|e| matches!(e.payload, EventPayload::AnswerStored { revision: 2, .. }))
        .unwrap()
        .seq;
    assert_eq!(
        replay(f.store.config(), &events, k - 1)
            .unwrap()
            .revisions("p01", "e1")
            .len(),
        1
    );
}

#[test]
fn replay_detects_gaps() {
    let f = fixture();
    start(&f, "p01");
    f.store.store_answer("p01", "e1", "{}").unwrap();
    let mut events = f.store.events();
    events.remove(2);
    let err = replay(f.store.config(), &events, events.len() as u64 + 1).unwrap_err();
    assert_eq!(err, ReplayError::Gap(3));
    assert_eq!(err.to_string(), "event log corrupt: missing 3");
}

#[test]
fn restart_recovers_state_from_storage() {
    let f = fixture();
    start(&f, "p01");
    f.store.store_answer("p01", "e3", r#"{"value": 3}"#).unwrap();
    f.store
        .add_exercise_live(f.pool.get("e6").unwrap().clone(), &demo::admin())
        .unwrap();
    let reopened = SessionStore::open(
        Arc::new(f.store.config().clone()),
        &f.pool,
        f.backend.clone(),
        "demo-1",
        Arc::new(f.clock.clone()),
    )
    .unwrap();
    assert_eq!(reopened.snapshot(), f.store.snapshot());
    assert!(reopened.bundle("e6").is_some());
}

#[test]
fn erase_requires_a_fresh_export() {
    let f = fixture();
    start(&f, "p01");
    f.store.store_answer("p01", "e4", r#"{"text":"sorted input"}"#).unwrap();
    assert!(matches!(f.store.erase_all(true), Err(SessionError::ExportRequired(_))));

    let dir = tempfile::tempdir().unwrap();
    f.store
        .export_all(
            dir.path(),
            &ExportExtras {
                mode: "live".into(),
                ..Default::default()
            },
        )
        .unwrap();
    assert!(f.store.export_is_fresh());
    f.store.store_answer("p01", "e4", r#"{"text":"one more"}"#).unwrap();
    assert!(!f.store.export_is_fresh());
    assert!(matches!(f.store.erase_all(true), Err(SessionError::ExportRequired(_))));

    let archive = f
        .store
        .export_all(
            dir.path(),
            &ExportExtras {
                mode: "live".into(),
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(archive.manifest.answer_revisions, 2);
    assert_eq!(archive.events().unwrap(), f.store.events());
    f.store.erase_all(true).unwrap();

    let raw = f.backend.raw_contents().unwrap();
    for entry in &f.store.config().roster {
        assert!(!raw.contains(&entry.matriculation_no));
        assert!(!raw.contains(&entry.display_name));
    }
    assert!(!raw.contains("sorted input"));
    assert!(f.store.events().is_empty());
    assert!(matches!(
        f.store.store_answer("p01", "e4", "{}"),
        Err(SessionError::Erased)
    ));
    // the archive kept everything
    let answer = std::fs::read_to_string(dir.path().join("answers/p01/e4/1.json")).unwrap();
    assert_eq!(answer, r#"{"text":"sorted input"}"#);
}

fn op() -> impl Strategy<Value = sim::Op> {
    use sim::Op;
    let p = 0usize..4;
    prop_oneof![
        Just(Op::Authorize),
        p.clone().prop_map(Op::Login),
        p.clone().prop_map(Op::BadLogin),
        p.clone().prop_map(Op::Bypass),
        p.clone().prop_map(Op::Accept),
        (p.clone(), 0usize..5).prop_map(|(a, b)| Op::Store(a, b)),
        (p.clone(), 0usize..5).prop_map(|(a, b)| Op::Load(a, b)),
        p.clone().prop_map(Op::Submit),
        (p.clone(), 0u32..4).prop_map(|(a, b)| Op::Extend(a, b)),
        p.prop_map(Op::Identity),
        (0i64..400).prop_map(Op::Advance),
        Just(sim::Op::Sweep),
    ]
}

#[test]
fn seeded_sequences_respect_the_state_machine() {
    let pool = demo::pool();
    let config = demo::shared_config(&pool);
    for seed in 0..200 {
        let ops = sim::random_sequence(seed, 60, 4);
        assert_eq!(sim::check_sequence(&config, &pool, &ops), Ok(()), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn random_operation_sequences_respect_the_state_machine(ops in proptest::collection::vec(op(), 0..60)) {
        let pool = demo::pool();
        let config = demo::shared_config(&pool);
        prop_assert_eq!(sim::check_sequence(&config, &pool, &ops), Ok(()));
    }

    #[test]
    fn answer_bodies_round_trip(value in arb_json(), pretty in any::<bool>()) {
        let f = fixture();
        start(&f, "p01");
        let body = if pretty { serde_json::to_string_pretty(&value).unwrap() } else { value.to_string() };
        f.store.store_answer("p01", "e4", &body).unwrap();
        prop_assert_eq!(f.store.load_answer("p01", "e4").unwrap().unwrap().body, body);
    }
}

fn arb_json() -> impl Strategy<Value = serde_json::Value> {
    let leaf = prop_oneof![
        Just(serde_json::Value::Null),
        any::<bool>().prop_map(serde_json::Value::from),
        any::<i64>().prop_map(serde_json::Value::from),
        (-1e9f64..1e9).prop_map(serde_json::Value::from),
        ".{0,20}".prop_map(serde_json::Value::from),
    ];
    leaf.prop_recursive(3, 32, 6, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..6).prop_map(serde_json::Value::Array),
            proptest::collection::btree_map("[a-z]{1,6}", inner, 0..6)
                .prop_map(|m| serde_json::Value::Object(m.into_iter().collect())),
        ]
    })
}
