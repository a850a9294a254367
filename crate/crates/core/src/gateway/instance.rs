use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::access::{AccessLevel, CredentialHash, Principal};
use crate::config::{
    parse_config, ExamConfig, GradeBoundary, GradeChart, ParticipantEntry, StartMode, TimingPolicy, CONFIG_FILE,
};
use crate::exercise::{load_bundle, ExercisePool, MANIFEST_FILE};
use crate::grading::Grader;
use crate::sandbox::SandboxService;
use crate::session::{SessionState, SessionStore, StationRecord};

/// Directory of exercise bundles inside an exam directory.
pub const EXERCISES_DIR: &str = "exercises";

/// Participant id, credential and station of the synthetic preview session.
pub const PREVIEW_PARTICIPANT: &str = "preview";
pub const PREVIEW_CREDENTIAL: &str = "preview";
pub const PREVIEW_STATION: &str = "preview";

/// An exam directory loaded from disk: `exam.toml` plus `exercises/`.
#[derive(Debug, Clone)]
pub struct ExamSource {
    pub dir: PathBuf,
    pub config: ExamConfig,
    pub pool: ExercisePool,
}

impl ExamSource {
    /// Loads and validates an exam directory. Errors are returned as
    /// human-readable diagnostics.
    pub fn load(dir: &Path) -> Result<Self, Vec<String>> {
        let pool = ExercisePool::load_dir(&dir.join(EXERCISES_DIR)).map_err(|e| vec![e.to_string()])?;
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
        let config = parse_config(&text, &pool).map_err(|e| vec![format!("{}: {e}", path.display())])?;
        Ok(ExamSource {
            dir: dir.to_owned(),
            config,
            pool,
        })
    }

    /// Loads an exam directory, or a single exercise bundle wrapped into a
    /// one-exercise exam so authors can try it on its own.
    pub fn load_for_preview(dir: &Path) -> Result<Self, Vec<String>> {
        if dir.join(CONFIG_FILE).is_file() || !dir.join(MANIFEST_FILE).is_file() {
            return Self::load(dir);
        }
        let bundle = load_bundle(dir).map_err(|e| vec![e.to_string()])?;
        let id = bundle.exercise_id.clone();
        let max = bundle.max_points;
        let pool = ExercisePool::from_bundles([bundle]).map_err(|e| vec![e.to_string()])?;
        let config = ExamConfig {
            exam_id: format!("preview-{id}"),
            title: format!("Preview of {id}"),
            exercise_refs: vec![id],
            timing: TimingPolicy {
                start_mode: StartMode::PerAcceptance,
                duration_minutes: 600,
                grace_seconds: 0,
            },
            roster: Vec::new(),
            role_grants: BTreeMap::new(),
            grade_chart: GradeChart::new(
                max,
                "not passed",
                vec![GradeBoundary {
                    min_points: max,
                    label: "passed".into(),
                }],
            )
            .map_err(|e| vec![e.to_string()])?,
            randomization_salt: "preview".into(),
            terms_text: "Preview mode: nothing is recorded.".into(),
        };
        Ok(ExamSource {
            dir: dir.to_owned(),
            config,
            pool,
        })
    }

    /// Reloads the pool from disk so bundles added after deployment can be
    /// used for live extension; falls back to the deploy-time pool.
    pub fn current_pool(&self) -> ExercisePool {
        ExercisePool::load_dir(&self.dir.join(EXERCISES_DIR)).unwrap_or_else(|_| self.pool.clone())
    }
}

/// The configuration a preview instance runs with: the roster is replaced by
/// one synthetic participant, so no personal data ever enters storage.
pub fn preview_config(config: &ExamConfig) -> ExamConfig {
    ExamConfig {
        roster: vec![ParticipantEntry {
            participant_id: PREVIEW_PARTICIPANT.into(),
            display_name: "Preview participant".into(),
            matriculation_no: "0".into(),
            credential_hash: CredentialHash::create("preview", PREVIEW_CREDENTIAL),
            email: None,
            room: None,
        }],
        timing: TimingPolicy {
            start_mode: StartMode::PerAcceptance,
            ..config.timing.clone()
        },
        ..config.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceMode {
    Preview,
    Trial,
    Live,
}

impl InstanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InstanceMode::Preview => "preview",
            InstanceMode::Trial => "trial",
            InstanceMode::Live => "live",
        }
    }
}

impl std::str::FromStr for InstanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "preview" => Ok(InstanceMode::Preview),
            "trial" => Ok(InstanceMode::Trial),
            "live" => Ok(InstanceMode::Live),
            other => Err(format!("unknown mode `{other}` (expected preview, trial or live)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Starting,
    Ready,
    Draining,
    TornDown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub exam_id: String,
    pub source_ref: String,
    pub mode: InstanceMode,
    pub route: String,
    pub status: InstanceStatus,
    pub created_at: DateTime<Utc>,
}

/// Bearer tokens issued by one instance. Tokens of one instance mean nothing
/// to another.
#[derive(Debug, Default)]
pub struct TokenRegistry {
    tokens: Mutex<HashMap<String, Principal>>,
}

impl TokenRegistry {
    pub fn issue(&self, principal: Principal) -> String {
        let mut bytes = [0u8; 24];
        rand::rng().fill_bytes(&mut bytes);
        let token = hex::encode(bytes);
        self.tokens.lock().unwrap().insert(token.clone(), principal);
        token
    }

    pub fn resolve(&self, token: &str) -> Option<Principal> {
        self.tokens.lock().unwrap().get(token).cloned()
    }

    /// Copies every token of `other` into this registry.
    pub fn adopt(&self, other: &TokenRegistry) {
        let theirs = other.tokens.lock().unwrap().clone();
        self.tokens.lock().unwrap().extend(theirs);
    }

    pub fn revoke_all(&self) {
        self.tokens.lock().unwrap().clear();
    }
}

/// What the monitoring view shows for one instance, taken from a single
/// snapshot of the session state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub exam_id: String,
    pub route: String,
    pub mode: InstanceMode,
    pub active_participants: usize,
    pub per_state: BTreeMap<String, usize>,
    pub stations: Vec<StationRecord>,
    pub sandbox_queue_depth: usize,
    pub last_seq: u64,
}

/// One deployed exam: its own storage namespace, sandbox queue, grader and
/// token registry.
pub struct Instance {
    pub(crate) descriptor: RwLock<InstanceDescriptor>,
    pub source: ExamSource,
    pub session: Arc<SessionStore>,
    pub grader: Grader,
    pub sandbox: Option<Arc<SandboxService>>,
    pub tokens: TokenRegistry,
    /// Validation problems found by the previewer's last reload attempt.
    pub diagnostics: Mutex<Vec<String>>,
    /// Distinguishes instances that reuse a route (preview reloads), so sync
    /// clients know their version counter refers to an older instance.
    pub generation: u64,
    in_flight: AtomicUsize,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Instance")
            .field("descriptor", &self.descriptor())
            .finish()
    }
}

pub(crate) struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Instance {
    pub(crate) fn new(
        descriptor: InstanceDescriptor,
        source: ExamSource,
        session: Arc<SessionStore>,
        sandbox: Option<Arc<SandboxService>>,
        generation: u64,
    ) -> Self {
        let live = sandbox.clone().map(|s| s as Arc<dyn crate::exercise::TestRunner>);
        Instance {
            descriptor: RwLock::new(descriptor),
            grader: Grader::new(session.clone(), live),
            source,
            session,
            sandbox,
            tokens: TokenRegistry::default(),
            diagnostics: Mutex::new(Vec::new()),
            generation,
            in_flight: AtomicUsize::new(0),
        }
    }

    pub fn descriptor(&self) -> InstanceDescriptor {
        self.descriptor.read().unwrap().clone()
    }

    pub fn route(&self) -> String {
        self.descriptor.read().unwrap().route.clone()
    }

    pub fn mode(&self) -> InstanceMode {
        self.descriptor.read().unwrap().mode
    }

    pub fn is_ready(&self) -> bool {
        self.descriptor.read().unwrap().status == InstanceStatus::Ready
    }

    pub(crate) fn set_status(&self, status: InstanceStatus) {
        self.descriptor.write().unwrap().status = status;
    }

    /// Marks a request as running until the guard is dropped.
    pub(crate) fn enter(&self) -> InFlight<'_> {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        InFlight(&self.in_flight)
    }

    pub(crate) fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn monitor(&self) -> MonitorReport {
        let state = self.session.snapshot();
        let descriptor = self.descriptor();
        MonitorReport {
            exam_id: descriptor.exam_id,
            route: descriptor.route,
            mode: descriptor.mode,
            active_participants: state.count_in(SessionState::InProgress),
            per_state: SessionState::ALL
                .iter()
                .map(|s| (s.as_str().to_owned(), state.count_in(*s)))
                .collect(),
            stations: state.stations.values().cloned().collect(),
            sandbox_queue_depth: self.sandbox.as_ref().map_or(0, |s| s.queue_depth()),
            last_seq: state.last_seq,
        }
    }

    /// A staff principal for this exam: the credential is checked against the
    /// host's staff directory and the level comes from the exam's role grants.
    pub fn staff_principal(
        &self,
        staff: &crate::access::StaffDirectory,
        principal: &str,
        credential: &str,
    ) -> Option<Principal> {
        if !staff.verify(principal, credential) {
            return None;
        }
        let level = self.session.config().level_of(principal)?;
        (level != AccessLevel::Participant).then(|| Principal::new(principal, level))
    }
}
