//! Acceptance suite: one check per primary criterion, each printed as a
//! PASS/FAIL line. Criteria that need a finished exam share a single
//! end-to-end run over HTTP.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::json;

use common::{eventually, Server};
use examkit::demo;
use examkit::exercise::{
    assess, instantiate_variant, AssessmentSpec, ExerciseView, Rule, SuiteRequest, TestRunner, VariantSeed,
};
use examkit::gateway::{Endpoint, InstanceMode, Requirement};
use examkit::grading::reevaluate_archive;
use examkit::sandbox::{JobAction, JobResult, JobStatus, SandboxJob, SandboxService, SubprocessBackend};
use examkit::session::{replay, sim, ExamState, ExportArchive, SessionState};
use examkit::{AccessLevel, Points};

/// Writes straight to the process stdout so the lines show up even when
/// the test harness captures output.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn participants() -> Vec<String> {
    (1..=25).map(|i| format!("p{i:02}")).collect()
}

/// Everything later criteria need from the end-to-end run.
struct E2e {
    elapsed: Duration,
    archive: ExportArchive,
    snapshots: Vec<ExamState>,
    storage_after_teardown: String,
    roster_needles: Vec<String>,
    answer_needles: Vec<String>,
    exported_csv: String,
    live_extension: Result<(), String>,
    /// Keeps the data directory holding the export alive.
    _server: Server,
}

fn correct_options(pool: &examkit::ExercisePool, exercise: &str, view: &ExerciseView) -> Vec<String> {
    let bundle = pool.get(exercise).unwrap();
    let AssessmentSpec::Declarative { rules } = &bundle.assessment else {
        panic!("{exercise} is declarative")
    };
    let Rule::Choice { options, .. } = &rules[0] else {
        panic!("{exercise} is a choice")
    };
    let correct: BTreeSet<&str> = options.iter().filter(|o| o.correct).map(|o| o.id.as_str()).collect();
    view.choices[0]
        .options
        .iter()
        .filter(|o| correct.contains(o.id.as_str()))
        .map(|o| o.id.clone())
        .collect()
}

/// The points each participant should end up with, worked out from the
/// answering plan below rather than from the grader.
fn expected_points(i: usize) -> Points {
    let mut milli = 0i64;
    if !i.is_multiple_of(3) {
        milli += 4000; // e1
    }
    if i.is_multiple_of(2) {
        milli += 4000; // e2
    }
    if i % 4 != 1 {
        milli += 4000; // e3
    }
    milli += (i % 11) as i64 * 1000; // e4, manual
    milli += match (i, i % 5) {
        (24, _) => 0,
        (_, 0) => 0,
        (_, 1) => 6000,
        _ => 8000,
    }; // e5
    if i <= 10 {
        milli += 2000; // e6, added live
    }
    milli += match i {
        3 => 2000,
        7 => 1500,
        _ => 0,
    };
    Points::from_milli(milli)
}

fn expected_grade(total: Points) -> &'static str {
    let t = total.milli();
    if t >= 28_000 {
        "1.0"
    } else if t >= 25_000 {
        "2.0"
    } else if t >= 21_000 {
        "3.0"
    } else if t >= 15_000 {
        "4.0"
    } else {
        "5.0"
    }
}

fn end_to_end() -> E2e {
    let started = Instant::now();
    let server = Server::start(true);
    let pool = demo::pool();
    let config = demo::config(&pool);

    // Deploy through the hook; the route must come up within one refresh.
    let route = server.deploy(InstanceMode::Live);
    assert!(eventually(Duration::from_millis(500), || server
        .orch
        .resolve(&route)
        .is_some()));
    let snapshots = Arc::new(Mutex::new(Vec::new()));
    let sink = snapshots.clone();
    let instance = server.orch.instance(&route).unwrap();
    assert_eq!(instance.session.last_seq(), 0);
    instance.session.set_recorder(Box::new(move |_, state: &ExamState| {
        sink.lock().unwrap().push(state.clone())
    }));

    let sup = server.staff(&route, "sup1");
    let admin = server.staff(&route, "admin1");
    let ids = participants();
    let mut tokens = BTreeMap::new();
    for (n, p) in ids.iter().enumerate() {
        let token = if n == 12 {
            // Lost credentials: the supervisor logs this one in.
            server.ok(&route, "authorize_station", &sup, json!({"station_id": "station-p13"}));
            let v = server.ok(
                &route,
                "bypass_login",
                &sup,
                json!({"participant_id": p, "station_id": "station-p13"}),
            );
            let t = v["token"].as_str().unwrap().to_owned();
            server.ok(&route, "accept_terms", &t, json!({}));
            t
        } else {
            server.sit(&route, &sup, p)
        };
        tokens.insert(p.clone(), token);
    }
    for p in ids.iter().step_by(4) {
        server.ok(&route, "mark_identity", &sup, json!({"participant_id": p}));
    }

    let mut answer_needles = Vec::new();
    for (n, p) in ids.iter().enumerate() {
        let i = n + 1;
        let t = &tokens[p];
        let listed = server.ok(&route, "list_exercises", t, json!({}));
        assert_eq!(listed.as_array().unwrap().len(), 5);
        let view = |e: &str| -> ExerciseView {
            serde_json::from_value(server.ok(&route, "get_exercise_assets", t, json!({"exercise_id": e}))).unwrap()
        };
        if i % 3 != 0 {
            let selected = correct_options(&pool, "e1", &view("e1"));
            server.ok(
                &route,
                "store_answer",
                t,
                json!({"exercise_id": "e1", "body": {"selected": selected}}),
            );
        }
        if i % 2 == 0 {
            let selected = correct_options(&pool, "e2", &view("e2"));
            server.ok(
                &route,
                "store_answer",
                t,
                json!({"exercise_id": "e2", "body": {"selected": selected}}),
            );
        }
        let params = view("e3").parameters;
        let sum = params["a"].as_i64().unwrap() + params["b"].as_i64().unwrap();
        let value = if i % 4 == 1 { sum + 1 } else { sum };
        server.ok(
            &route,
            "store_answer",
            t,
            json!({"exercise_id": "e3", "body": {"value": value}}),
        );
        let essay = format!("Essay {p}: hashing with linear probing, draft {i} unique-{}", i * 7919);
        answer_needles.push(format!("unique-{}", i * 7919));
        server.ok(
            &route,
            "store_answer",
            t,
            json!({"exercise_id": "e4", "body": {"text": essay}}),
        );
        if i != 24 {
            let source = match i % 5 {
                0 => String::new(),
                1 => demo::program("max_off_by_one.c"),
                _ => demo::reference_solution(),
            };
            server.ok(
                &route,
                "store_answer",
                t,
                json!({"exercise_id": "e5", "body": {"files": {"main.c": source}}}),
            );
        }
    }

    // Compile tests from the programming view.
    let ok = server.ok(
        &route,
        "compile_test",
        &tokens["p02"],
        json!({"exercise_id": "e5", "stdin": "3\n4 9 2\n"}),
    );
    let ok: JobResult = serde_json::from_value(ok).unwrap();
    assert_eq!((ok.status, ok.program_output.as_str()), (JobStatus::Ok, "9\n"));
    let broken = server.ok(
        &route,
        "compile_test",
        &tokens["p05"],
        json!({"exercise_id": "e5", "files": {"main.c": demo::program("syntax_error.c")}}),
    );
    let broken: JobResult = serde_json::from_value(broken).unwrap();
    assert_eq!(broken.status, JobStatus::CompileError);
    assert!(!broken.compiler_output.is_empty());

    // Early submitters, then an exercise is added live.
    for p in &ids[20..25] {
        server.ok(&route, "submit", &tokens[p], json!({}));
    }
    let before: BTreeMap<String, Vec<String>> = instance
        .session
        .snapshot()
        .sessions
        .into_iter()
        .map(|(p, s)| (p, s.exercises))
        .collect();
    server.ok(&route, "add_exercise_live", &admin, json!({"exercise_id": "e6"}));
    let live_extension = (|| {
        let after = instance.session.snapshot();
        for (p, record) in &after.sessions {
            let old = &before[p];
            match record.state {
                SessionState::InProgress => {
                    let listed = server.ok(&route, "list_exercises", &tokens[p], json!({}));
                    let ids: Vec<&str> = listed
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|e| e["exercise_id"].as_str().unwrap())
                        .collect();
                    if !ids.contains(&"e6") || record.exercises.len() != old.len() + 1 {
                        return Err(format!("{p} did not get e6: {ids:?}"));
                    }
                }
                SessionState::Submitted => {
                    if &record.exercises != old {
                        return Err(format!("submitted session {p} changed: {:?}", record.exercises));
                    }
                }
                other => return Err(format!("{p} unexpectedly {other:?}")),
            }
        }
        Ok(())
    })();
    for p in &ids[0..10] {
        server.ok(
            &route,
            "store_answer",
            &tokens[p],
            json!({"exercise_id": "e6", "body": {"value": 1024}}),
        );
    }
    for p in &ids[10..20] {
        server.ok(&route, "submit", &tokens[p], json!({}));
    }

    // The rest run out of time; the background sweep submits them.
    server.clock.advance(chrono::Duration::minutes(11));
    assert!(eventually(Duration::from_secs(5), || {
        instance.session.snapshot().count_in(SessionState::Submitted) == 25
    }));
    let late = server
        .call(
            &route,
            "store_answer",
            Some(&tokens["p01"]),
            json!({"exercise_id": "e3", "body": {"value": 1}}),
        )
        .unwrap_err();
    assert_eq!(late.status, 409);
    let monitor = server.ok(&route, "monitor", &sup, json!({}));
    assert_eq!(monitor["active_participants"], 0);
    assert_eq!(monitor["per_state"]["submitted"], 25);

    // Evaluation, manual scores, bonus, clearing.
    let evaluated = server.ok(&route, "evaluate", &admin, json!({}));
    assert_eq!(evaluated["needs_rerun"], 0);
    assert_eq!(evaluated["blocking_slots"].as_array().unwrap().len(), 25);
    let refused = server.call(&route, "clear", Some(&admin), json!({})).unwrap_err();
    assert_eq!(refused.code, "clearing_blocked");
    assert_eq!(refused.details.unwrap().as_array().unwrap().len(), 25);
    for (n, p) in ids.iter().enumerate() {
        let score = ((n + 1) % 11) as i64;
        server.ok(
            &route,
            "manual_score",
            &admin,
            json!({"participant_id": p, "exercise_id": "e4", "score": score, "explanation": "structure and argument"}),
        );
    }
    let bonus = server.ok(
        &route,
        "import_bonus",
        &admin,
        json!({"csv": "participant_id,points,note\np03,2,lab\np07,1.5,lab\n"}),
    );
    assert_eq!(bonus["applied"].as_array().unwrap().len(), 2);
    let book = server.ok(&route, "gradebook", &admin, json!({}));
    for (n, p) in ids.iter().enumerate() {
        let entry = book["gradebook"]["entries"]
            .as_array()
            .unwrap()
            .iter()
            .find(|e| e["participant_id"] == *p)
            .unwrap();
        let total: Points = serde_json::from_value(entry["total"].clone()).unwrap();
        assert_eq!(total, expected_points(n + 1), "total of {p}");
        assert_eq!(entry["grade_label"], expected_grade(total), "grade of {p}");
    }
    let early = server
        .call(&route, "download_report", Some(&tokens["p05"]), json!({}))
        .unwrap_err();
    assert_eq!(early.code, "not_cleared");
    server.ok(&route, "clear", &admin, json!({}));

    // Distribution to the outbox and self-service download.
    let log = server.ok(&route, "distribute", &admin, json!({"mode": "email"}));
    assert_eq!(log["delivered"].as_array().unwrap().len(), 25, "{log}");
    let outbox = server.data_dir.path().join("outbox").join(&route);
    let messages = common::walk(&outbox);
    assert_eq!(messages.len(), 25);
    let first = std::fs::read_to_string(&messages[0]).unwrap();
    assert!(first.starts_with("To: p01@students.example.org\n"), "{first}");
    let again = server.ok(&route, "distribute", &admin, json!({"mode": "email"}));
    assert!(again["delivered"].as_array().unwrap().is_empty());
    let v = server
        .call(
            &route,
            "report_login",
            None,
            json!({"participant_id": "p05", "credential": demo::credential("p05")}),
        )
        .unwrap();
    let report = server.ok(&route, "download_report", v["token"].as_str().unwrap(), json!({}));
    let content = report["content"].as_str().unwrap();
    let overview = content.split('\x0c').next().unwrap();
    assert!(overview.contains("Overview"));
    assert!(
        overview.contains(&format!("Grade: {}", expected_grade(expected_points(5)))),
        "{overview}"
    );

    // Export, then teardown.
    let exported = server.ok(&route, "export", &admin, json!({}));
    let archive = ExportArchive::open(&PathBuf::from(exported["dir"].as_str().unwrap())).unwrap();
    assert!(!archive.manifest.trial);
    assert_eq!(archive.manifest.participants, 25);
    let exported_csv = std::fs::read_to_string(archive.dir.join(examkit::session::RESULTS_FILE)).unwrap();
    server.ok(&route, "teardown", &admin, json!({}));
    assert!(eventually(Duration::from_millis(500), || server
        .orch
        .route_table()
        .routes
        .is_empty()));
    assert_eq!(
        server
            .call(&route, "monitor", Some(&sup), json!({}))
            .unwrap_err()
            .status,
        404
    );

    // No answer may carry a timestamp past its session's deadline plus grace.
    let events = archive.events().unwrap();
    let final_state = replay(&config, &events, events.len() as u64).unwrap();
    for (p, answers) in &final_state.answers {
        let record = &final_state.sessions[p];
        let deadline = config
            .timing
            .deadline(record.effective_start, record.extensions)
            .unwrap();
        let last = config.timing.last_write(deadline);
        for doc in answers.values().flatten() {
            assert!(
                doc.stored_at <= last,
                "{p} stored {} at {}",
                doc.exercise_id,
                doc.stored_at
            );
        }
    }

    let roster_needles = config
        .roster
        .iter()
        .flat_map(|e| [e.display_name.clone(), e.matriculation_no.clone()])
        .collect();
    let snapshots = snapshots.lock().unwrap().clone();
    E2e {
        elapsed: started.elapsed(),
        archive,
        snapshots,
        storage_after_teardown: server.storage_dump(),
        roster_needles,
        answer_needles,
        exported_csv,
        live_extension,
        _server: server,
    }
}

fn replay_oracle(run: &E2e) -> Result<String, String> {
    let config = demo::config(&demo::pool());
    let events = run.archive.events().map_err(|e| e.to_string())?;
    if events.len() != run.snapshots.len() {
        return Err(format!("{} events, {} snapshots", events.len(), run.snapshots.len()));
    }
    if replay(&config, &events, 0).unwrap() != ExamState::initial(&config) {
        return Err("empty prefix differs from the initial state".into());
    }
    for (k, snapshot) in run.snapshots.iter().enumerate() {
        let replayed = replay(&config, &events, k as u64 + 1).map_err(|e| e.to_string())?;
        if &replayed != snapshot {
            return Err(format!("prefix {} differs", k + 1));
        }
    }
    Ok(format!("{} prefixes", events.len()))
}

fn grading_determinism(run: &E2e) -> Result<String, String> {
    let pool = demo::pool();
    let (book_a, csv_a) = reevaluate_archive(&run.archive, &pool).map_err(|e| e.to_string())?;
    let (book_b, csv_b) = reevaluate_archive(&run.archive, &pool).map_err(|e| e.to_string())?;
    if book_a.to_json() != book_b.to_json() || csv_a != csv_b {
        return Err("two evaluations of the archive differ".into());
    }
    if book_a.needs_rerun() != 0 {
        return Err(format!("{} results without a transcript", book_a.needs_rerun()));
    }
    if csv_a != run.exported_csv {
        return Err("re-evaluated spreadsheet differs from the exported one".into());
    }
    Ok(format!("{} bytes of spreadsheet, identical", csv_a.len()))
}

struct NoSandbox;

impl TestRunner for NoSandbox {
    fn run_suite(&self, _: &SuiteRequest) -> Result<JobResult, String> {
        Err("declarative exercises never reach the sandbox".into())
    }
}

fn randomization() -> Result<String, String> {
    let pool = demo::pool();
    let mut checked = 0;
    for bundle in pool.bundles().values().filter(|b| b.variants.is_some()) {
        let mut distinct = BTreeSet::new();
        for seed in 0..128u64 {
            let variant = instantiate_variant(bundle, VariantSeed(seed)).map_err(|e| e.to_string())?;
            let view = bundle.participant_view(&variant).map_err(|e| e.to_string())?;
            // The correct answer is derived here from the public view and the
            // manifest, not taken from the library.
            let answer = match bundle.exercise_id.as_str() {
                "e1" | "e2" => json!({"selected": correct_options(&pool, &bundle.exercise_id, &view)}),
                "e3" => {
                    json!({"value": view.parameters["a"].as_i64().unwrap() + view.parameters["b"].as_i64().unwrap()})
                }
                other => return Err(format!("no oracle for randomized exercise {other}")),
            };
            let result =
                assess(bundle, &variant, Some(&answer.to_string()), &NoSandbox, "p01").map_err(|e| e.to_string())?;
            if result.score != bundle.max_points {
                return Err(format!(
                    "{} seed {seed}: {} of {}",
                    bundle.exercise_id, result.score, bundle.max_points
                ));
            }
            distinct.insert(serde_json::to_string(&(&view.parameters, &view.choices)).unwrap());
        }
        if distinct.len() < 2 {
            return Err(format!("{} produced a single variant", bundle.exercise_id));
        }
        checked += 1;
    }
    Ok(format!("{checked} randomized exercises x 128 seeds"))
}

fn declared_levels(endpoint: &str) -> &'static [&'static str] {
    const PARTICIPANT: &[&str] = &[
        "accept_terms",
        "list_exercises",
        "get_exercise_assets",
        "store_answer",
        "load_answer",
        "compile_test",
        "submit",
        "download_report",
        "sync",
    ];
    const SUPERVISOR: &[&str] = &[
        "authorize_station",
        "bypass_login",
        "extend_time",
        "mark_identity",
        "list_sessions",
        "monitor",
    ];
    const ADMIN: &[&str] = &[
        "evaluate",
        "gradebook",
        "manual_score",
        "import_bonus",
        "clear",
        "distribute",
        "export",
        "add_exercise_live",
        "teardown",
    ];
    if ["login", "report_login", "staff_login"].contains(&endpoint) {
        &["anonymous", "participant", "supervisor", "admin"]
    } else if PARTICIPANT.contains(&endpoint) {
        &["participant"]
    } else if SUPERVISOR.contains(&endpoint) {
        &["supervisor", "admin"]
    } else if ADMIN.contains(&endpoint) {
        &["admin"]
    } else {
        &[]
    }
}

fn authorization_matrix() -> Result<String, String> {
    let server = Server::start(true);
    let route = server.deploy(InstanceMode::Trial);
    let sup = server.staff(&route, "sup1");
    let admin = server.staff(&route, "admin1");
    let participant = server.sit(&route, &sup, "p09");

    // Marker scan over every participant-scope payload first.
    let mut payloads = Vec::new();
    payloads.push(server.ok(&route, "list_exercises", &participant, json!({})));
    payloads.push(server.ok(&route, "sync", &participant, json!({})));
    for e in ["e1", "e2", "e3", "e4", "e5"] {
        payloads.push(server.ok(&route, "get_exercise_assets", &participant, json!({"exercise_id": e})));
    }
    payloads.push(server.ok(
        &route,
        "store_answer",
        &participant,
        json!({"exercise_id": "e3", "body": {"value": 3}}),
    ));
    payloads.push(server.ok(&route, "load_answer", &participant, json!({"exercise_id": "e3"})));
    payloads.push(server.ok(
        &route,
        "compile_test",
        &participant,
        json!({"exercise_id": "e5", "files": {"main.c": demo::reference_solution()}, "stdin": "1\n5\n"}),
    ));
    let text = serde_json::to_string(&payloads).unwrap();
    for marker in demo::assessment_markers() {
        if text.contains(&marker) {
            return Err(format!("participant payload contains `{marker}`"));
        }
    }

    let tokens = [
        ("anonymous", None),
        ("participant", Some(participant.as_str())),
        ("supervisor", Some(sup.as_str())),
        ("admin", Some(admin.as_str())),
    ];
    let mut pairs = 0;
    for endpoint in Endpoint::ALL {
        let declared = declared_levels(endpoint.name());
        if declared.is_empty() {
            return Err(format!("endpoint {} is not in the declared matrix", endpoint.name()));
        }
        for (label, token) in tokens {
            let (status, body) = server.raw(&route, endpoint.name(), token, "not json");
            let allowed = declared.contains(&label);
            let expected_denial = if token.is_none() { 401 } else { 403 };
            let ok = if allowed {
                !matches!(status, 401 | 403)
            } else {
                status == expected_denial
            };
            if !ok {
                return Err(format!("{} by {label}: {status} {body}", endpoint.name()));
            }
            let table_says = endpoint.requirement().admits(match label {
                "anonymous" => None,
                "participant" => Some(AccessLevel::Participant),
                "supervisor" => Some(AccessLevel::Supervisor),
                _ => Some(AccessLevel::Admin),
            });
            if table_says != allowed {
                return Err(format!("endpoint table disagrees for {} by {label}", endpoint.name()));
            }
            pairs += 1;
        }
    }
    let public = Endpoint::ALL
        .iter()
        .filter(|e| e.requirement() == Requirement::Public)
        .count();
    Ok(format!(
        "{pairs} endpoint/level pairs, {public} public endpoints, no markers"
    ))
}

fn state_machine() -> Result<String, String> {
    let pool = demo::pool();
    let config = demo::shared_config(&pool);
    let seeds = 10_000u64;
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8) as u64;
    let failures: Vec<String> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (config, pool) = (&config, &pool);
                scope.spawn(move || {
                    (t..seeds)
                        .step_by(threads as usize)
                        .filter_map(|seed| {
                            let ops = sim::random_sequence(seed, 60, 4);
                            sim::check_sequence(config, pool, &ops)
                                .err()
                                .map(|e| format!("seed {seed}: {e}"))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    match failures.first() {
        None => Ok(format!("{seeds} sequences of 60 operations")),
        Some(first) => Err(format!("{} failing sequences, first: {first}", failures.len())),
    }
}

fn privacy(run: &E2e) -> Result<String, String> {
    let dump = &run.storage_after_teardown;
    for needle in run.roster_needles.iter().chain(&run.answer_needles) {
        if dump.contains(needle.as_str()) {
            return Err(format!("storage still holds `{needle}`"));
        }
    }
    for event_marker in ["\"seq\"", "answer_stored", "terms_accepted"] {
        if dump.contains(event_marker) {
            return Err(format!("storage still holds events (`{event_marker}`)"));
        }
    }
    // The archive has what storage no longer has.
    let archived = run.archive.config_text().map_err(|e| e.to_string())?;
    if !archived.contains(&run.roster_needles[0]) {
        return Err("export lacks the roster".into());
    }

    let server = Server::start(false);
    let route = server.deploy(InstanceMode::Live);
    let sup = server.staff(&route, "sup1");
    let admin = server.staff(&route, "admin1");
    server.sit(&route, &sup, "p04");
    let refused = server.call(&route, "teardown", Some(&admin), json!({})).unwrap_err();
    if refused.code != "export_required" {
        return Err(format!("teardown without export gave {refused}"));
    }
    if !server.storage_dump().contains("p04") {
        return Err("refused teardown still erased data".into());
    }
    Ok(format!(
        "{} roster and answer needles absent; erase without export refused",
        run.roster_needles.len() + run.answer_needles.len()
    ))
}

fn sandbox() -> Result<String, String> {
    let config = demo::sandbox_config();
    let service = SandboxService::start(config.clone()).map_err(|e| e.to_string())?;
    let job = |source: String| SandboxJob {
        exam_id: "acceptance".into(),
        participant_id: "p01".into(),
        source_files: BTreeMap::from([("main.c".to_owned(), source)]),
        toolchain: "c".into(),
        action: JobAction::CompileAndRun { stdin: String::new() },
        limits: None,
    };

    // Isolation probe: a concurrent job's marker must stay invisible.
    let writer = service
        .submit(job(demo::program("marker_writer.c")))
        .map_err(|e| e.to_string())?;
    std::thread::sleep(Duration::from_millis(700));
    let scan = service
        .run(job(demo::program("marker_scanner.c")))
        .map_err(|e| e.to_string())?;
    service.await_result(writer, None).map_err(|e| e.to_string())?;
    if !scan.program_output.starts_with("marker=0 ") {
        return Err(format!("isolation probe saw: {}", scan.program_output));
    }
    let isolation = SubprocessBackend::new(std::env::temp_dir().join("examkit-acceptance"))
        .map_err(|e| e.to_string())?
        .isolation();

    let started = Instant::now();
    let spin = service.run(job(demo::program("spin.c"))).map_err(|e| e.to_string())?;
    let wall = config.profiles["c"].limits.wall_time_ms;
    if spin.status != JobStatus::Timeout || started.elapsed() >= Duration::from_millis(wall + 2000) {
        return Err(format!("spin: {:?} after {:?}", spin.status, started.elapsed()));
    }
    let hog = service
        .run(job(demo::program("memory_hog.c")))
        .map_err(|e| e.to_string())?;
    if hog.status != JobStatus::ResourceExceeded {
        return Err(format!("memory hog: {:?}", hog.status));
    }
    let a = service
        .run(job(demo::reference_solution()))
        .map_err(|e| e.to_string())?;
    let b = service
        .run(job(demo::reference_solution()))
        .map_err(|e| e.to_string())?;
    if (a.status, &a.program_output, &a.compiler_output) != (b.status, &b.program_output, &b.compiler_output) {
        return Err("identical jobs differ".into());
    }

    let pool = demo::pool();
    let bundle = pool.get("e5").unwrap();
    let variant = instantiate_variant(bundle, VariantSeed(0)).map_err(|e| e.to_string())?;
    let answer = json!({"files": {"main.c": demo::program("max_off_by_one.c")}}).to_string();
    let result = assess(bundle, &variant, Some(&answer), &service, "p01").map_err(|e| e.to_string())?;
    let passed = result
        .test_outcomes
        .as_ref()
        .map_or(0, |t| t.iter().filter(|o| o.passed).count());
    if (passed, result.score) != (3, Points::whole(6)) {
        return Err(format!("3-of-4 fixture: {passed} passed, {} points", result.score));
    }
    Ok(format!(
        "isolation {isolation:?}, timeout in {:?}, 6 of 8",
        started.elapsed()
    ))
}

fn needs_run(run: &Result<E2e, String>) -> Result<&E2e, String> {
    run.as_ref().map_err(|e| format!("end-to-end run failed: {e}"))
}

fn check(results: &mut Vec<bool>, number: usize, name: &str, f: impl FnOnce() -> Result<String, String>) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let message = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(message)
    });
    match &outcome {
        Ok(detail) => report(&format!("PASS [{number}] {name}: {detail}")),
        Err(reason) => report(&format!("FAIL [{number}] {name}: {reason}")),
    }
    results.push(outcome.is_ok());
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    let run = catch_unwind(end_to_end).map_err(|panic| {
        panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    });

    check(&mut results, 1, "end-to-end desk-scale exam", || {
        let run = needs_run(&run)?;
        if run.elapsed >= Duration::from_secs(300) {
            return Err(format!("took {:?}", run.elapsed));
        }
        Ok(format!(
            "25 participants, 5 exercises plus 1 added live, {:.1}s",
            run.elapsed.as_secs_f64()
        ))
    });
    check(&mut results, 2, "replay oracle", || replay_oracle(needs_run(&run)?));
    check(&mut results, 3, "grading determinism", || {
        grading_determinism(needs_run(&run)?)
    });
    check(&mut results, 4, "randomization correctness", randomization);
    check(&mut results, 5, "authorization matrix", authorization_matrix);
    check(&mut results, 6, "state machine", state_machine);
    check(&mut results, 7, "data-privacy lifecycle", || privacy(needs_run(&run)?));
    check(&mut results, 8, "sandbox", sandbox);
    check(&mut results, 9, "live extension", || {
        needs_run(&run)?
            .live_extension
            .clone()
            .map(|()| "in-progress sessions grew, submitted ones unchanged".into())
    });

    let passed = results.iter().filter(|r| **r).count();
    report(&format!("acceptance: {passed} of {} criteria pass", results.len()));
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}
