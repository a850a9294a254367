//! Endpoint table, access matrix and request handlers.
//!
//! Every endpoint is `POST /x/{route}/api/{name}` with a JSON body and an
//! optional `Authorization: Bearer <token>` header. Tokens come from one of
//! the login endpoints and are only valid for the instance that issued them.
//! Participant endpoints always act on the caller's own session; none of them
//! takes a participant id.
//!
//! Errors are `{"code": ..., "message": ..., "details": ...}` with an HTTP
//! status derived from the code.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::instance::Instance;
use super::orchestrator::Orchestrator;
use super::GatewayError;
use crate::access::{AccessLevel, Principal};
use crate::exercise::{AssessmentSpec, ExerciseKind};
use crate::grading::{parse_bonus_csv, spreadsheet, GradingError};
use crate::points::Points;
use crate::sandbox::{JobAction, SandboxJob};
use crate::session::{DistributionMode, EventPayload, LoginMode, SessionError, SessionState, SubmitCause};

/// Who may call an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    /// No token needed.
    Public,
    /// A participant token; the endpoint acts on that participant's session.
    Participant,
    /// A staff token of at least this level.
    Staff(AccessLevel),
}

impl Requirement {
    /// Whether a caller at `level` (or anonymous) may use the endpoint.
    pub fn admits(self, level: Option<AccessLevel>) -> bool {
        match (self, level) {
            (Requirement::Public, _) => true,
            (_, None) => false,
            (Requirement::Participant, Some(l)) => l == AccessLevel::Participant,
            (Requirement::Staff(min), Some(l)) => l >= min,
        }
    }
}

macro_rules! endpoints {
    ($($variant:ident => $name:literal, $req:expr;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Endpoint { $($variant),* }

        impl Endpoint {
            pub const ALL: &'static [Endpoint] = &[$(Endpoint::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Endpoint::$variant => $name),* }
            }

            pub fn requirement(self) -> Requirement {
                match self { $(Endpoint::$variant => $req),* }
            }

            pub fn from_name(name: &str) -> Option<Endpoint> {
                match name { $($name => Some(Endpoint::$variant),)* _ => None }
            }
        }
    };
}

use Requirement::{Participant as P, Public, Staff};
const SUPERVISOR: Requirement = Staff(AccessLevel::Supervisor);
const ADMIN: Requirement = Staff(AccessLevel::Admin);

endpoints! {
    Login => "login", Public;
    ReportLogin => "report_login", Public;
    StaffLogin => "staff_login", Public;
    AcceptTerms => "accept_terms", P;
    ListExercises => "list_exercises", P;
    GetExerciseAssets => "get_exercise_assets", P;
    StoreAnswer => "store_answer", P;
    LoadAnswer => "load_answer", P;
    CompileTest => "compile_test", P;
    Submit => "submit", P;
    DownloadReport => "download_report", P;
    Sync => "sync", P;
    AuthorizeStation => "authorize_station", SUPERVISOR;
    BypassLogin => "bypass_login", SUPERVISOR;
    ExtendTime => "extend_time", SUPERVISOR;
    MarkIdentity => "mark_identity", SUPERVISOR;
    ListSessions => "list_sessions", SUPERVISOR;
    Monitor => "monitor", SUPERVISOR;
    Evaluate => "evaluate", ADMIN;
    Gradebook => "gradebook", ADMIN;
    ManualScore => "manual_score", ADMIN;
    ImportBonus => "import_bonus", ADMIN;
    Clear => "clear", ADMIN;
    Distribute => "distribute", ADMIN;
    Export => "export", ADMIN;
    AddExerciseLive => "add_exercise_live", ADMIN;
    Teardown => "teardown", ADMIN;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.status, self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            details: None,
        }
    }

    pub fn unauthenticated() -> Self {
        ApiError::new(
            401,
            "unauthenticated",
            "a valid token for this exam instance is required",
        )
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(400, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(404, "not_found", message)
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

fn status_for(code: &str) -> u16 {
    match code {
        "unauthenticated" | "bad_credential" => 401,
        "forbidden" => 403,
        "not_found" | "unknown_participant" | "unknown_exercise" => 404,
        "bad_request" | "validation_failed" | "invalid_body" | "invalid_extension" | "out_of_range" | "not_manual" => {
            400
        }
        "sandbox_busy" => 503,
        "internal" | "variant_error" | "archive_error" | "sandbox_error" => 500,
        _ => 409,
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let code = e.code();
        let details = match &e {
            GatewayError::Validation(diagnostics) => Some(json!(diagnostics)),
            GatewayError::Grading(GradingError::Blocked(slots)) => Some(json!(slots)),
            GatewayError::Grading(GradingError::NotSubmitted(ps)) => Some(json!(ps)),
            GatewayError::Grading(GradingError::Incomplete { slots, .. }) => Some(json!(slots)),
            _ => None,
        };
        if code == "internal" {
            tracing::error!(error = %e, "internal error while handling a request");
        }
        let err = ApiError::new(status_for(code), code, e.to_string());
        match details {
            Some(d) => err.with_details(d),
            None => err,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        GatewayError::from(e).into()
    }
}

impl From<GradingError> for ApiError {
    fn from(e: GradingError) -> Self {
        GatewayError::from(e).into()
    }
}

/// One line of the participant's exercise list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExerciseSummary {
    pub exercise_id: String,
    pub title: String,
    pub kind: ExerciseKind,
    pub max_points: Points,
    pub revision: Option<u32>,
}

/// Server → client state message. The server is authoritative: the client
/// replaces its countdown and submitted flag with what it receives and
/// applies `exercise_delta` on top of its list for the given `version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncEnvelope {
    /// Identifies the instance behind the route; a change means the client
    /// must drop its list (`reset` is then set).
    pub generation: u64,
    /// Sequence number of the last event the envelope reflects.
    pub version: u64,
    /// The delta holds the full list rather than additions.
    pub reset: bool,
    pub server_time: DateTime<Utc>,
    pub state: SessionState,
    pub deadline: Option<DateTime<Utc>>,
    pub remaining_seconds: Option<i64>,
    pub exercise_delta: Vec<ExerciseSummary>,
    pub station_authorized: bool,
    pub force_submit: bool,
    /// Preview only: problems found when reloading the exam from disk.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRequest {
    #[serde(default)]
    pub client_version: u64,
    #[serde(default)]
    pub generation: u64,
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

fn to_value<T: Serialize>(value: T) -> Result<Value, ApiError> {
    serde_json::to_value(value).map_err(|e| ApiError::new(500, "internal", e.to_string()))
}

/// Resolves the caller and checks the access matrix. Nothing about the
/// request body is inspected before this passes.
pub fn authorize(instance: &Instance, endpoint: Endpoint, token: Option<&str>) -> Result<Option<Principal>, ApiError> {
    let principal = token.and_then(|t| instance.tokens.resolve(t));
    let requirement = endpoint.requirement();
    if requirement == Requirement::Public {
        return Ok(principal);
    }
    let Some(principal) = principal else {
        return Err(ApiError::unauthenticated());
    };
    if !requirement.admits(Some(principal.level)) {
        return Err(ApiError::new(
            403,
            "forbidden",
            format!("{} requires {}", endpoint.name(), describe(requirement)),
        ));
    }
    Ok(Some(principal))
}

fn describe(requirement: Requirement) -> String {
    match requirement {
        Requirement::Public => "nothing".into(),
        Requirement::Participant => "a participant session".into(),
        Requirement::Staff(level) => format!("access level {level}"),
    }
}

/// Handles one API call against one instance. Blocking: runs sandbox jobs
/// and grading inline.
pub fn dispatch(
    orch: &Orchestrator,
    instance: &Arc<Instance>,
    endpoint: Endpoint,
    token: Option<&str>,
    body: &[u8],
) -> Result<Value, ApiError> {
    let principal = authorize(instance, endpoint, token)?;
    // Teardown drains in-flight requests, so it must not count as one.
    let _guard = (endpoint != Endpoint::Teardown).then(|| instance.enter());
    if !instance.is_ready() {
        return Err(ApiError::not_found(format!(
            "instance `{}` is shutting down",
            instance.route()
        )));
    }
    let ctx = Ctx {
        orch,
        instance,
        principal,
    };
    match endpoint.requirement() {
        Requirement::Public => ctx.public(endpoint, body),
        Requirement::Participant => ctx.participant(endpoint, body),
        Requirement::Staff(_) => ctx.staff(endpoint, body),
    }
}

struct Ctx<'a> {
    orch: &'a Orchestrator,
    instance: &'a Arc<Instance>,
    principal: Option<Principal>,
}

#[derive(Deserialize)]
struct LoginBody {
    participant_id: String,
    credential: String,
    #[serde(default)]
    station_id: String,
}

#[derive(Deserialize)]
struct StaffLoginBody {
    principal: String,
    credential: String,
}

#[derive(Deserialize)]
struct ExerciseBody {
    exercise_id: String,
}

#[derive(Deserialize)]
struct StoreBody {
    exercise_id: String,
    body: Value,
}

#[derive(Deserialize)]
struct CompileBody {
    exercise_id: String,
    #[serde(default)]
    files: Option<std::collections::BTreeMap<String, String>>,
    #[serde(default)]
    stdin: String,
}

#[derive(Deserialize)]
struct StationBody {
    station_id: String,
}

#[derive(Deserialize)]
struct BypassBody {
    participant_id: String,
    station_id: String,
}

#[derive(Deserialize)]
struct ExtendBody {
    participant_id: String,
    minutes: u32,
}

#[derive(Deserialize)]
struct ParticipantBody {
    participant_id: String,
}

#[derive(Deserialize)]
struct EvaluateBody {
    #[serde(default)]
    force: bool,
}

#[derive(Deserialize)]
struct ManualScoreBody {
    participant_id: String,
    exercise_id: String,
    score: Points,
    #[serde(default)]
    explanation: String,
}

#[derive(Deserialize)]
struct BonusBody {
    csv: String,
}

#[derive(Deserialize)]
struct DistributeBody {
    mode: DistributionMode,
}

#[derive(Deserialize)]
struct TeardownBody {
    #[serde(default = "yes")]
    require_export: bool,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct SessionRow {
    participant_id: String,
    display_name: String,
    matriculation_no: String,
    state: SessionState,
    station_id: Option<String>,
    login_mode: Option<LoginMode>,
    identity_checked: bool,
    extensions: u32,
    deadline: Option<DateTime<Utc>>,
    remaining_seconds: Option<i64>,
}

impl Ctx<'_> {
    fn principal(&self) -> &Principal {
        self.principal.as_ref().expect("authorized endpoints have a principal")
    }

    fn session(&self) -> &crate::session::SessionStore {
        &self.instance.session
    }

    fn issue_participant_token(&self, participant: &str) -> String {
        self.instance
            .tokens
            .issue(Principal::new(participant, AccessLevel::Participant))
    }

    fn remaining(&self, deadline: Option<DateTime<Utc>>) -> Option<i64> {
        deadline.map(|d| (d - self.session().now()).num_seconds().max(0))
    }

    fn public(&self, endpoint: Endpoint, body: &[u8]) -> Result<Value, ApiError> {
        match endpoint {
            Endpoint::Login => {
                let b: LoginBody = parse(body)?;
                let record = self.session().login(
                    &b.participant_id,
                    Some(&b.credential),
                    LoginMode::Credential,
                    None,
                    &b.station_id,
                )?;
                Ok(json!({ "token": self.issue_participant_token(&b.participant_id), "session": record }))
            }
            Endpoint::ReportLogin => {
                let b: LoginBody = parse(body)?;
                self.session().verify_credential(&b.participant_id, &b.credential)?;
                Ok(json!({ "token": self.issue_participant_token(&b.participant_id) }))
            }
            Endpoint::StaffLogin => {
                let b: StaffLoginBody = parse(body)?;
                let principal = self
                    .instance
                    .staff_principal(self.orch.staff(), &b.principal, &b.credential)
                    .ok_or_else(|| {
                        ApiError::new(401, "bad_credential", "unknown staff principal or wrong credential")
                    })?;
                let level = principal.level;
                Ok(json!({ "token": self.instance.tokens.issue(principal), "level": level }))
            }
            _ => unreachable!("not a public endpoint"),
        }
    }

    fn participant(&self, endpoint: Endpoint, body: &[u8]) -> Result<Value, ApiError> {
        let me = self.principal().id.clone();
        let session = self.session();
        match endpoint {
            Endpoint::AcceptTerms => to_value(session.accept_terms(&me)?),
            Endpoint::ListExercises => {
                self.require_started(&me)?;
                to_value(self.summaries(&me, None)?)
            }
            Endpoint::GetExerciseAssets => {
                let b: ExerciseBody = parse(body)?;
                self.require_own_exercise(&me, &b.exercise_id)?;
                let bundle = session
                    .bundle(&b.exercise_id)
                    .ok_or_else(|| SessionError::UnknownExercise(b.exercise_id.clone()))?;
                let variant = session.variant_for(&me, &b.exercise_id)?;
                let view = bundle.participant_view(&variant).map_err(SessionError::from)?;
                to_value(view)
            }
            Endpoint::StoreAnswer => {
                let b: StoreBody = parse(body)?;
                let text = serde_json::to_string(&b.body).expect("values serialize");
                let revision = session.store_answer(&me, &b.exercise_id, &text)?;
                Ok(json!({ "exercise_id": b.exercise_id, "revision": revision }))
            }
            Endpoint::LoadAnswer => {
                let b: ExerciseBody = parse(body)?;
                self.require_own_exercise(&me, &b.exercise_id)?;
                to_value(session.load_answer(&me, &b.exercise_id)?)
            }
            Endpoint::CompileTest => self.compile_test(&me, parse(body)?),
            Endpoint::Submit => to_value(session.submit(&me, SubmitCause::Participant)?),
            Endpoint::DownloadReport => {
                let report = self.instance.grader.download_report(&me)?;
                Ok(json!({ "file_name": report.file_name(), "content": report.render() }))
            }
            Endpoint::Sync => to_value(self.sync(&me, parse(body)?)?),
            _ => unreachable!("not a participant endpoint"),
        }
    }

    fn require_started(&self, me: &str) -> Result<(), ApiError> {
        let record = self.session().session(me)?;
        if matches!(record.state, SessionState::InProgress | SessionState::Submitted) {
            Ok(())
        } else {
            Err(SessionError::WrongState {
                participant: me.into(),
                state: record.state,
                operation: "view exercises",
            }
            .into())
        }
    }

    fn require_own_exercise(&self, me: &str, exercise: &str) -> Result<(), ApiError> {
        self.require_started(me)?;
        if self.session().session(me)?.exercises.iter().any(|e| e == exercise) {
            Ok(())
        } else {
            Err(SessionError::UnknownExercise(exercise.into()).into())
        }
    }

    /// The caller's exercises, or only those added after `since`.
    fn summaries(&self, me: &str, since: Option<u64>) -> Result<Vec<ExerciseSummary>, ApiError> {
        let session = self.session();
        let record = session.session(me)?;
        let state = session.snapshot();
        let added_after: Option<Vec<String>> = since.map(|v| {
            session
                .events()
                .into_iter()
                .filter(|e| e.seq > v)
                .filter_map(|e| match e.payload {
                    EventPayload::ExerciseAdded { exercise_id } => Some(exercise_id),
                    _ => None,
                })
                .collect()
        });
        Ok(record
            .exercises
            .iter()
            .filter(|id| added_after.as_ref().is_none_or(|added| added.contains(id)))
            .filter_map(|id| session.bundle(id))
            .map(|b| ExerciseSummary {
                exercise_id: b.exercise_id.clone(),
                title: b.title.clone(),
                kind: b.kind,
                max_points: b.max_points,
                revision: state.latest_answer(me, &b.exercise_id).map(|a| a.revision),
            })
            .collect())
    }

    fn sync(&self, me: &str, request: SyncRequest) -> Result<SyncEnvelope, ApiError> {
        let session = self.session();
        // Deadlines are enforced here as well as by the periodic sweep, so a
        // client never sees time left that the server would not accept.
        session.sweep()?;
        let record = session.session(me)?;
        let version = session.last_seq();
        let reset = request.generation != self.instance.generation
            || request.client_version == 0
            || request.client_version > version;
        let started = matches!(record.state, SessionState::InProgress | SessionState::Submitted);
        let exercise_delta = match (started, reset) {
            (false, _) => Vec::new(),
            (true, true) => self.summaries(me, None)?,
            (true, false) => self.summaries(me, Some(request.client_version))?,
        };
        let deadline = session.deadline(me).ok();
        let station_authorized = record
            .station_id
            .as_deref()
            .and_then(|s| session.station(s))
            .is_some_and(|s| s.authorized);
        Ok(SyncEnvelope {
            generation: self.instance.generation,
            version,
            reset,
            server_time: session.now(),
            state: record.state,
            deadline,
            remaining_seconds: self.remaining(deadline),
            exercise_delta,
            station_authorized,
            force_submit: record.state == SessionState::Submitted,
            diagnostics: self.instance.diagnostics.lock().unwrap().clone(),
        })
    }

    fn compile_test(&self, me: &str, b: CompileBody) -> Result<Value, ApiError> {
        let session = self.session();
        let record = session.session(me)?;
        if record.state != SessionState::InProgress {
            return Err(SessionError::WrongState {
                participant: me.into(),
                state: record.state,
                operation: "compile",
            }
            .into());
        }
        self.require_own_exercise(me, &b.exercise_id)?;
        let bundle = session
            .bundle(&b.exercise_id)
            .ok_or_else(|| SessionError::UnknownExercise(b.exercise_id.clone()))?;
        let AssessmentSpec::Sandboxed { toolchain, .. } = &bundle.assessment else {
            return Err(ApiError::bad_request(format!(
                "exercise `{}` is not a programming exercise",
                b.exercise_id
            )));
        };
        let sandbox = self
            .instance
            .sandbox
            .as_ref()
            .ok_or_else(|| ApiError::new(503, "sandbox_unavailable", "this instance has no sandbox configured"))?;
        let files = match b.files {
            Some(files) => files,
            None => session
                .load_answer(me, &b.exercise_id)?
                .and_then(|a| serde_json::from_str::<Value>(&a.body).ok())
                .and_then(|doc| crate::exercise::source_files(&doc))
                .ok_or_else(|| ApiError::bad_request("no source files given or stored"))?,
        };
        let job = SandboxJob {
            exam_id: session.config().exam_id.clone(),
            participant_id: me.to_owned(),
            source_files: files,
            toolchain: toolchain.clone(),
            action: JobAction::CompileAndRun { stdin: b.stdin },
            limits: None,
        };
        let result = sandbox.run(job).map_err(GatewayError::from)?;
        to_value(result)
    }

    fn staff(&self, endpoint: Endpoint, body: &[u8]) -> Result<Value, ApiError> {
        let by = self.principal().clone();
        let session = self.session();
        let grader = &self.instance.grader;
        let route = self.instance.route();
        match endpoint {
            Endpoint::AuthorizeStation => {
                let b: StationBody = parse(body)?;
                to_value(session.authorize_station(&b.station_id, &by)?)
            }
            Endpoint::BypassLogin => {
                let b: BypassBody = parse(body)?;
                let record = session.login(
                    &b.participant_id,
                    None,
                    LoginMode::SupervisorBypass,
                    Some(&by),
                    &b.station_id,
                )?;
                Ok(json!({ "token": self.issue_participant_token(&b.participant_id), "session": record }))
            }
            Endpoint::ExtendTime => {
                let b: ExtendBody = parse(body)?;
                let record = session.extend_time(&b.participant_id, b.minutes, &by)?;
                let deadline = session.deadline(&b.participant_id).ok();
                Ok(json!({ "session": record, "deadline": deadline }))
            }
            Endpoint::MarkIdentity => {
                let b: ParticipantBody = parse(body)?;
                to_value(session.mark_identity_checked(&b.participant_id, &by)?)
            }
            Endpoint::ListSessions => {
                let state = session.snapshot();
                let config = session.config();
                let rows: Vec<SessionRow> = state
                    .sessions
                    .values()
                    .map(|s| {
                        let entry = config.participant(&s.participant_id);
                        let deadline = session.deadline(&s.participant_id).ok();
                        SessionRow {
                            participant_id: s.participant_id.clone(),
                            display_name: entry.map(|e| e.display_name.clone()).unwrap_or_default(),
                            matriculation_no: entry.map(|e| e.matriculation_no.clone()).unwrap_or_default(),
                            state: s.state,
                            station_id: s.station_id.clone(),
                            login_mode: s.login_mode,
                            identity_checked: s.identity_checked,
                            extensions: s.extensions,
                            deadline,
                            remaining_seconds: self.remaining(deadline),
                        }
                    })
                    .collect();
                to_value(rows)
            }
            Endpoint::Monitor => to_value(self.orch.monitor(&route, &by)?),
            Endpoint::Evaluate => {
                let b: EvaluateBody = parse(body)?;
                let book = grader.evaluate_exam(&by, b.force)?;
                Ok(json!({
                    "participants": book.entries.len(),
                    "needs_rerun": book.needs_rerun(),
                    "blocking_slots": book.blocking_slots(),
                }))
            }
            Endpoint::Gradebook => {
                let book = grader.gradebook()?;
                let csv = spreadsheet(&book, session.config());
                Ok(json!({ "gradebook": book, "csv": csv }))
            }
            Endpoint::ManualScore => {
                let b: ManualScoreBody = parse(body)?;
                to_value(grader.set_manual_score(&b.participant_id, &b.exercise_id, b.score, &b.explanation, &by)?)
            }
            Endpoint::ImportBonus => {
                let b: BonusBody = parse(body)?;
                let records = parse_bonus_csv(&b.csv).map_err(ApiError::bad_request)?;
                to_value(grader.import_bonus(&records, &by)?)
            }
            Endpoint::Clear => to_value(grader.clear_and_release(&by)?),
            Endpoint::Distribute => {
                let b: DistributeBody = parse(body)?;
                let log = match b.mode {
                    DistributionMode::Email => {
                        let transport = self.orch.mail_for(&route)?;
                        grader.distribute(b.mode, Some(transport.as_ref()), &by)?
                    }
                    DistributionMode::Portal => grader.distribute(b.mode, None, &by)?,
                };
                to_value(log)
            }
            Endpoint::Export => {
                let archive = self.orch.export(&route, &by)?;
                Ok(json!({ "dir": archive.dir, "manifest": archive.manifest }))
            }
            Endpoint::AddExerciseLive => {
                let b: ExerciseBody = parse(body)?;
                let pool = self.instance.source.current_pool();
                let bundle = pool
                    .get(&b.exercise_id)
                    .cloned()
                    .ok_or_else(|| SessionError::UnknownExercise(b.exercise_id.clone()))?;
                Ok(json!({ "exercises": session.add_exercise_live(bundle, &by)? }))
            }
            Endpoint::Teardown => {
                let b: TeardownBody = parse(body)?;
                to_value(self.orch.teardown(&route, b.require_export, &by)?)
            }
            _ => unreachable!("not a staff endpoint"),
        }
    }
}

/// In-process counterpart of `POST /x/{route}/api/{endpoint}`: resolves the
/// route through the route table exactly like the HTTP layer does.
pub fn call(
    orch: &Orchestrator,
    route: &str,
    endpoint: &str,
    token: Option<&str>,
    body: Value,
) -> Result<Value, ApiError> {
    let endpoint =
        Endpoint::from_name(endpoint).ok_or_else(|| ApiError::not_found(format!("no endpoint `{endpoint}`")))?;
    let instance = orch
        .resolve(route)
        .ok_or_else(|| ApiError::not_found(format!("no exam at `{route}`")))?;
    let body = serde_json::to_vec(&body).expect("values serialize");
    dispatch(orch, &instance, endpoint, token, &body)
}
