use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};
use tempfile::TempDir;

use super::*;
use crate::access::AccessLevel;
use crate::clock::ManualClock;
use crate::demo;
use crate::store::{DocumentStore, MemoryStore};

struct Fixture {
    orch: Arc<Orchestrator>,
    clock: Arc<ManualClock>,
    store: Arc<MemoryStore>,
    _data: TempDir,
}

fn fixture() -> Fixture {
    let data = TempDir::new().unwrap();
    let clock = Arc::new(ManualClock::new(demo::at(9, 0)));
    let store = Arc::new(MemoryStore::new());
    let mut config = GatewayConfig::in_memory(data.path());
    config.store = store.clone();
    config.clock = clock.clone();
    config.staff = demo::staff();
    Fixture {
        orch: Arc::new(Orchestrator::new(config)),
        clock,
        store,
        _data: data,
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let target = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}

impl Fixture {
    fn deploy(&self, mode: InstanceMode) -> String {
        let d = self.orch.deploy(&demo::exam_dir(), "v1", mode).unwrap();
        self.orch.refresh_routes();
        d.route
    }

    fn call(&self, route: &str, endpoint: &str, token: Option<&str>, body: Value) -> Result<Value, ApiError> {
        call(&self.orch, route, endpoint, token, body)
    }

    fn ok(&self, route: &str, endpoint: &str, token: &str, body: Value) -> Value {
        self.call(route, endpoint, Some(token), body)
            .unwrap_or_else(|e| panic!("{endpoint}: {e}"))
    }

    fn staff(&self, route: &str, who: &str) -> String {
        let v = self
            .call(
                route,
                "staff_login",
                None,
                json!({"principal": who, "credential": demo::staff_credential(who)}),
            )
            .unwrap();
        v["token"].as_str().unwrap().to_owned()
    }

    /// Authorizes station `s-<p>`, logs `p` in and accepts the terms.
    fn sit(&self, route: &str, p: &str) -> String {
        let sup = self.staff(route, "sup1");
        let station = format!("s-{p}");
        self.ok(route, "authorize_station", &sup, json!({"station_id": station}));
        let v = self
            .call(
                route,
                "login",
                None,
                json!({"participant_id": p, "credential": demo::credential(p), "station_id": station}),
            )
            .unwrap();
        let token = v["token"].as_str().unwrap().to_owned();
        self.ok(route, "accept_terms", &token, json!({}));
        token
    }
}

#[test]
fn deploy_yields_ready_instances_at_distinct_routes() {
    let f = fixture();
    let a = f.orch.deploy(&demo::exam_dir(), "v1", InstanceMode::Trial).unwrap();
    let b = f.orch.deploy(&demo::exam_dir(), "v1", InstanceMode::Trial).unwrap();
    assert_eq!(a.status, InstanceStatus::Ready);
    assert_eq!(a.exam_id, "demo-exam");
    assert_ne!(a.route, b.route);
    f.orch.refresh_routes();
    assert!(f.orch.resolve(&a.route).is_some());
    assert!(f.orch.resolve(&b.route).is_some());
}

#[test]
fn invalid_config_is_refused_with_diagnostics() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    copy_dir(&demo::exam_dir(), dir.path());
    let path = dir.path().join("exam.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(
        &path,
        text.replace(
            r#"exercises = ["e1", "e2", "e3", "e4", "e5"]"#,
            r#"exercises = ["e1", "e1"]"#,
        ),
    )
    .unwrap();
    match f.orch.deploy(dir.path(), "v1", InstanceMode::Trial) {
        Err(GatewayError::Validation(diagnostics)) => {
            assert!(diagnostics.iter().any(|d| d.contains("e1")), "{diagnostics:?}");
        }
        other => panic!("expected validation failure, got {other:?}"),
    }
    assert!(f.orch.descriptors().is_empty());
}

#[test]
fn live_mode_needs_a_roster() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    copy_dir(&demo::exam_dir(), dir.path());
    let path = dir.path().join("exam.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.find("[[roster]]").unwrap();
    std::fs::write(&path, &text[..cut]).unwrap();
    assert!(matches!(
        f.orch.deploy(dir.path(), "v1", InstanceMode::Live),
        Err(GatewayError::Validation(_))
    ));
}

#[test]
fn routes_follow_refresh() {
    let f = fixture();
    let d = f.orch.deploy(&demo::exam_dir(), "v1", InstanceMode::Trial).unwrap();
    assert!(f.orch.resolve(&d.route).is_none(), "not routed before a refresh");
    let table = f.orch.refresh_routes();
    assert_eq!(table.routes.keys().collect::<Vec<_>>(), vec![&d.route]);
    assert!(f.orch.resolve(&d.route).is_some());

    let admin = f.staff(&d.route, "admin1");
    f.ok(&d.route, "export", &admin, json!({}));
    f.ok(&d.route, "teardown", &admin, json!({}));
    let err = f.call(&d.route, "list_exercises", Some(&admin), json!({})).unwrap_err();
    assert_eq!(err.status, 404);
    assert!(f.orch.refresh_routes().routes.is_empty());
    assert_eq!(
        f.orch.instance(&d.route).unwrap().descriptor().status,
        InstanceStatus::TornDown
    );
}

#[test]
fn instances_are_isolated() {
    let f = fixture();
    let a = f.deploy(InstanceMode::Trial);
    let b = f.deploy(InstanceMode::Trial);
    let ta = f.sit(&a, "p01");
    f.ok(
        &a,
        "store_answer",
        &ta,
        json!({"exercise_id": "e3", "body": {"value": 42}}),
    );

    // A's token means nothing to B.
    let err = f
        .call(&b, "load_answer", Some(&ta), json!({"exercise_id": "e3"}))
        .unwrap_err();
    assert_eq!(err.status, 401);
    let tb = f.sit(&b, "p01");
    assert_eq!(f.ok(&b, "load_answer", &tb, json!({"exercise_id": "e3"})), Value::Null);
    assert_eq!(
        f.ok(&a, "load_answer", &ta, json!({"exercise_id": "e3"}))["body"],
        r#"{"value":42}"#
    );

    let ia = f.orch.resolve(&a).unwrap();
    let ib = f.orch.resolve(&b).unwrap();
    assert_ne!(ia.session.namespace(), ib.session.namespace());
    assert!(f.store.scan(ib.session.namespace(), "answers").unwrap().is_empty());
}

/// The declared matrix, written out independently of the endpoint table.
fn declared_matrix() -> BTreeMap<&'static str, &'static [&'static str]> {
    let public: &[&str] = &["anonymous", "participant", "supervisor", "admin"];
    let participant: &[&str] = &["participant"];
    let supervisor: &[&str] = &["supervisor", "admin"];
    let admin: &[&str] = &["admin"];
    let mut m = BTreeMap::new();
    for e in ["login", "report_login", "staff_login"] {
        m.insert(e, public);
    }
    for e in [
        "accept_terms",
        "list_exercises",
        "get_exercise_assets",
        "store_answer",
        "load_answer",
        "compile_test",
        "submit",
        "download_report",
        "sync",
    ] {
        m.insert(e, participant);
    }
    for e in [
        "authorize_station",
        "bypass_login",
        "extend_time",
        "mark_identity",
        "list_sessions",
        "monitor",
    ] {
        m.insert(e, supervisor);
    }
    for e in [
        "evaluate",
        "gradebook",
        "manual_score",
        "import_bonus",
        "clear",
        "distribute",
        "export",
        "add_exercise_live",
        "teardown",
    ] {
        m.insert(e, admin);
    }
    m
}

#[test]
fn endpoint_table_matches_declared_matrix() {
    let declared = declared_matrix();
    assert_eq!(Endpoint::ALL.len(), declared.len());
    for endpoint in Endpoint::ALL {
        let allowed = declared[endpoint.name()];
        let levels = [
            ("anonymous", None),
            ("participant", Some(AccessLevel::Participant)),
            ("supervisor", Some(AccessLevel::Supervisor)),
            ("admin", Some(AccessLevel::Admin)),
        ];
        for (label, level) in levels {
            assert_eq!(
                endpoint.requirement().admits(level),
                allowed.contains(&label),
                "{} for {label}",
                endpoint.name()
            );
        }
        assert_eq!(Endpoint::from_name(endpoint.name()), Some(*endpoint));
    }
}

#[test]
fn dispatch_enforces_the_matrix_before_parsing() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let tokens = [
        ("anonymous", None),
        ("participant", Some(f.sit(&route, "p01"))),
        ("supervisor", Some(f.staff(&route, "sup1"))),
        ("admin", Some(f.staff(&route, "admin1"))),
    ];
    let declared = declared_matrix();
    for endpoint in Endpoint::ALL {
        for (label, token) in &tokens {
            // Garbage body: a permitted call fails with 400 at the earliest,
            // a forbidden one must fail with 401/403 before that.
            let instance = f.orch.resolve(&route).unwrap();
            let result = api::dispatch(&f.orch, &instance, *endpoint, token.as_deref(), b"not json");
            let status = result.err().map_or(200, |e| e.status);
            let allowed = declared[endpoint.name()].contains(label);
            if allowed {
                assert!(
                    !matches!(status, 401 | 403),
                    "{} by {label} got {status}",
                    endpoint.name()
                );
            } else {
                let expected = if token.is_none() { 401 } else { 403 };
                assert_eq!(status, expected, "{} by {label}", endpoint.name());
            }
        }
    }
}

#[test]
fn participant_payloads_carry_no_assessment_markers() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let token = f.sit(&route, "p02");
    let mut payloads = vec![
        f.ok(&route, "list_exercises", &token, json!({})),
        f.ok(&route, "sync", &token, json!({})),
    ];
    for e in ["e1", "e2", "e3", "e4", "e5"] {
        payloads.push(f.ok(&route, "get_exercise_assets", &token, json!({"exercise_id": e})));
        payloads.push(f.ok(&route, "load_answer", &token, json!({"exercise_id": e})));
    }
    let text = serde_json::to_string(&payloads).unwrap();
    for marker in demo::assessment_markers() {
        assert!(!text.contains(&marker), "participant payload leaks `{marker}`");
    }
    // The scan is meaningful: the markers do occur in the staff gradebook.
    assert!(text.contains("Maximum of a sequence"));
}

#[test]
fn participant_endpoints_act_on_own_session() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let t1 = f.sit(&route, "p01");
    let _t2 = f.sit(&route, "p02");
    // A participant id in the body is ignored.
    f.ok(
        &route,
        "store_answer",
        &t1,
        json!({"exercise_id": "e3", "body": {"value": 1}, "participant_id": "p02"}),
    );
    let state = f.orch.resolve(&route).unwrap().session.snapshot();
    assert!(state.latest_answer("p01", "e3").is_some());
    assert!(state.latest_answer("p02", "e3").is_none());
}

#[test]
fn staff_calls_are_checked_against_the_matrix() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let token = f.sit(&route, "p01");
    let err = f
        .call(
            &route,
            "extend_time",
            Some(&token),
            json!({"participant_id": "p01", "minutes": 5}),
        )
        .unwrap_err();
    assert_eq!((err.status, err.code.as_str()), (403, "forbidden"));
    let sup = f.staff(&route, "sup1");
    let err = f.call(&route, "evaluate", Some(&sup), json!({})).unwrap_err();
    assert_eq!(err.status, 403);
    let err = f
        .call(
            &route,
            "staff_login",
            None,
            json!({"principal": "sup1", "credential": "nope"}),
        )
        .unwrap_err();
    assert_eq!(err.status, 401);
}

#[test]
fn report_download_waits_for_clearing() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let token = f.sit(&route, "p01");
    f.ok(&route, "submit", &token, json!({}));
    let err = f.call(&route, "download_report", Some(&token), json!({})).unwrap_err();
    assert_eq!(err.code, "not_cleared");
    assert_eq!(err.status, 409);
}

#[test]
fn teardown_requires_fresh_export_except_for_preview() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Live);
    let admin = f.staff(&route, "admin1");
    let token = f.sit(&route, "p03");
    f.ok(
        &route,
        "store_answer",
        &token,
        json!({"exercise_id": "e4", "body": {"text": "a distinctive essay body"}}),
    );

    let err = f.call(&route, "teardown", Some(&admin), json!({})).unwrap_err();
    assert_eq!(err.code, "export_required");
    f.ok(&route, "export", &admin, json!({}));
    // New activity makes the export stale again.
    f.ok(
        &route,
        "store_answer",
        &token,
        json!({"exercise_id": "e4", "body": {"text": "revised"}}),
    );
    assert_eq!(
        f.call(&route, "teardown", Some(&admin), json!({})).unwrap_err().code,
        "export_required"
    );
    f.ok(&route, "export", &admin, json!({}));
    f.ok(&route, "teardown", &admin, json!({}));

    let raw = f.store.raw_contents().unwrap();
    for needle in ["Chen Wei", "4711003", "distinctive essay", "revised", "terms_accepted"] {
        assert!(!raw.contains(needle), "storage still holds `{needle}`");
    }

    let preview = f.deploy(InstanceMode::Preview);
    let d = f.orch.teardown(&preview, true, &demo::admin()).unwrap();
    assert_eq!(d.status, InstanceStatus::TornDown);
}

#[test]
fn monitor_counts_follow_session_state() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let tokens: Vec<String> = ["p01", "p02", "p03", "p04"].iter().map(|p| f.sit(&route, p)).collect();
    f.ok(&route, "submit", &tokens[3], json!({}));
    let sup = f.staff(&route, "sup1");
    let report: MonitorReport = serde_json::from_value(f.ok(&route, "monitor", &sup, json!({}))).unwrap();
    assert_eq!(report.active_participants, 3);
    assert_eq!(report.per_state["submitted"], 1);
    assert_eq!(report.stations.len(), 4);

    let err = f.call(&route, "monitor", Some(&tokens[0]), json!({})).unwrap_err();
    assert_eq!(err.status, 403);
    assert!(f.orch.monitor_all(&demo::supervisor()).is_err());
    assert_eq!(f.orch.monitor_all(&demo::admin()).unwrap().len(), 1);

    f.clock.advance(chrono::Duration::minutes(11));
    assert_eq!(f.orch.sweep_all(), 3);
    let report = f.orch.monitor(&route, &demo::supervisor()).unwrap();
    assert_eq!(report.active_participants, 0);
    assert_eq!(report.per_state["submitted"], 4);
}

#[test]
fn sync_envelope_uses_server_clock_and_deltas() {
    let f = fixture();
    let route = f.deploy(InstanceMode::Trial);
    let token = f.sit(&route, "p05");
    let first: SyncEnvelope = serde_json::from_value(f.ok(&route, "sync", &token, json!({}))).unwrap();
    assert!(first.reset);
    assert_eq!(first.remaining_seconds, Some(600));
    assert_eq!(first.exercise_delta.len(), 5);
    assert!(first.station_authorized);
    assert!(!first.force_submit);

    f.clock.advance(chrono::Duration::seconds(90));
    let admin = f.staff(&route, "admin1");
    f.ok(&route, "add_exercise_live", &admin, json!({"exercise_id": "e6"}));
    let request = json!({"client_version": first.version, "generation": first.generation});
    let second: SyncEnvelope = serde_json::from_value(f.ok(&route, "sync", &token, request)).unwrap();
    assert!(!second.reset);
    assert_eq!(second.remaining_seconds, Some(510));
    let added: Vec<&str> = second.exercise_delta.iter().map(|e| e.exercise_id.as_str()).collect();
    assert_eq!(added, ["e6"]);

    // Past deadline plus grace the server submits and tells the client.
    f.clock.advance(chrono::Duration::seconds(510 + 31));
    let request = json!({"client_version": second.version, "generation": second.generation});
    let third: SyncEnvelope = serde_json::from_value(f.ok(&route, "sync", &token, request)).unwrap();
    assert!(third.force_submit);
    assert_eq!(third.remaining_seconds, Some(0));
}

#[test]
fn same_source_yields_same_variants() {
    let f = fixture();
    let a = f.deploy(InstanceMode::Trial);
    let b = f.deploy(InstanceMode::Trial);
    let ta = f.sit(&a, "p07");
    let tb = f.sit(&b, "p07");
    for e in ["e1", "e2", "e3"] {
        assert_eq!(
            f.ok(&a, "get_exercise_assets", &ta, json!({"exercise_id": e})),
            f.ok(&b, "get_exercise_assets", &tb, json!({"exercise_id": e}))
        );
    }
}

#[test]
fn previewer_reloads_and_keeps_serving_on_errors() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    copy_dir(&demo::exam_dir(), dir.path());
    let previewer = Previewer::start(f.orch.clone(), dir.path()).unwrap();
    let route = previewer.route().to_owned();
    let v = f
        .call(
            &route,
            "login",
            None,
            json!({"participant_id": PREVIEW_PARTICIPANT, "credential": PREVIEW_CREDENTIAL, "station_id": PREVIEW_STATION}),
        )
        .unwrap();
    let token = v["token"].as_str().unwrap().to_owned();
    f.ok(&route, "accept_terms", &token, json!({}));
    f.ok(
        &route,
        "store_answer",
        &token,
        json!({"exercise_id": "e3", "body": {"value": 7}}),
    );
    let first: SyncEnvelope = serde_json::from_value(f.ok(&route, "sync", &token, json!({}))).unwrap();
    assert_eq!(previewer.poll().unwrap(), preview::Reload::Unchanged);

    let manifest = dir.path().join("exercises/e3/manifest.toml");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replace("Mental arithmetic", "Mental arithmetic, revised"),
    )
    .unwrap();
    assert!(matches!(previewer.poll().unwrap(), preview::Reload::Reloaded { .. }));
    let request = json!({"client_version": first.version, "generation": first.generation});
    let second: SyncEnvelope = serde_json::from_value(f.ok(&route, "sync", &token, request)).unwrap();
    assert!(second.reset);
    let e3 = second.exercise_delta.iter().find(|e| e.exercise_id == "e3").unwrap();
    assert_eq!(e3.title, "Mental arithmetic, revised");
    assert_eq!(
        f.ok(&route, "load_answer", &token, json!({"exercise_id": "e3"}))["body"],
        r#"{"value":7}"#
    );

    std::fs::write(&manifest, "id = \"e3\"\nkind = ").unwrap();
    assert!(matches!(previewer.poll().unwrap(), preview::Reload::Rejected(_)));
    let third: SyncEnvelope = serde_json::from_value(f.ok(&route, "sync", &token, json!({}))).unwrap();
    assert!(!third.diagnostics.is_empty());
    assert!(third
        .exercise_delta
        .iter()
        .any(|e| e.title == "Mental arithmetic, revised"));

    // Nothing from the real roster ever reaches storage.
    let raw = f.store.raw_contents().unwrap();
    for needle in ["Amara Okafor", "4711001", "p01@students"] {
        assert!(!raw.contains(needle));
    }
}

#[test]
fn previewer_serves_a_single_bundle() {
    let f = fixture();
    let previewer = Previewer::start(f.orch.clone(), demo::exam_dir().join("exercises/e5")).unwrap();
    let instance = previewer.instance().unwrap();
    assert_eq!(instance.session.config().exercise_refs, ["e5"]);
    assert_eq!(instance.mode(), InstanceMode::Preview);
}
