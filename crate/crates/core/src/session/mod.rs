//! Per-participant exam sessions over an append-only event log.
//!
//! Every command validates against the current [`ExamState`], builds an
//! [`InteractionEvent`], persists it, and then folds it into the state with
//! [`apply`]. The event append is the global linearization point; sequence
//! numbers are assigned under one lock. The same [`apply`] powers
//! [`replay`], so any prefix of the log reproduces the state the system held
//! at that point.

mod export;
pub mod sim;
mod state;

pub use export::{ExportArchive, ExportExtras, ExportManifest, EVENTS_FILE, MANIFEST_FILE, RESULTS_FILE};
pub use state::*;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};

use crate::access::{require, AccessDenied, AccessLevel, Principal};
use crate::clock::Clock;
use crate::config::ExamConfig;
use crate::exercise::{derive_seed, instantiate_variant, ExerciseBundle, ExercisePool, VariantError, VariantInstance};
use crate::store::{DocumentStore, StoreError};

pub const ANSWERS_COLLECTION: &str = "answers";
pub const CONFIG_COLLECTION: &str = "config";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Access(#[from] AccessDenied),
    #[error("unknown participant `{0}`")]
    UnknownParticipant(String),
    #[error("invalid credential")]
    BadCredential,
    #[error("station `{0}` is not authorized")]
    StationNotAuthorized(String),
    #[error("cannot {operation}: session of `{participant}` is {state}")]
    WrongState {
        participant: String,
        state: SessionState,
        operation: &'static str,
    },
    #[error("answer rejected: last write was accepted until {last_write}")]
    AfterDeadline { last_write: DateTime<Utc> },
    #[error("the exam starts at {start}")]
    NotStarted { start: DateTime<Utc> },
    #[error("no effective start: {0}")]
    NoEffectiveStart(String),
    #[error("exercise `{0}` is not part of this exam instance")]
    UnknownExercise(String),
    #[error("exercise `{0}` is already part of the exam")]
    DuplicateExercise(String),
    #[error("answer body is not a structured document: {0}")]
    InvalidBody(String),
    #[error("extension must be a positive number of minutes")]
    InvalidExtension,
    #[error("erase refused: {0}")]
    ExportRequired(String),
    #[error("exam data has been erased")]
    Erased,
    #[error("storage: {0}")]
    Store(#[from] StoreError),
    #[error("event log: {0}")]
    Corrupt(#[from] ReplayError),
    #[error("variant: {0}")]
    Variant(#[from] VariantError),
    #[error("export I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl SessionError {
    /// Stable machine-readable code for API clients.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Access(_) => "forbidden",
            SessionError::UnknownParticipant(_) => "unknown_participant",
            SessionError::BadCredential => "bad_credential",
            SessionError::StationNotAuthorized(_) => "station_not_authorized",
            SessionError::WrongState { .. } => "wrong_state",
            SessionError::AfterDeadline { .. } => "after_deadline",
            SessionError::NotStarted { .. } => "not_started",
            SessionError::NoEffectiveStart(_) => "no_effective_start",
            SessionError::UnknownExercise(_) => "unknown_exercise",
            SessionError::DuplicateExercise(_) => "duplicate_exercise",
            SessionError::InvalidBody(_) => "invalid_body",
            SessionError::InvalidExtension => "invalid_extension",
            SessionError::ExportRequired(_) => "export_required",
            SessionError::Erased => "erased",
            SessionError::Store(_) | SessionError::Corrupt(_) | SessionError::Io(_) => "internal",
            SessionError::Variant(_) => "variant_error",
        }
    }
}

/// Receives every committed event together with the state right after it.
pub type SnapshotRecorder = Box<dyn FnMut(&InteractionEvent, &ExamState) + Send>;

struct Inner {
    state: ExamState,
    events: Vec<InteractionEvent>,
    exported_seq: Option<u64>,
    erased: bool,
    recorder: Option<SnapshotRecorder>,
}

pub struct SessionStore {
    config: Arc<ExamConfig>,
    namespace: String,
    store: Arc<dyn DocumentStore>,
    clock: Arc<dyn Clock>,
    bundles: RwLock<BTreeMap<String, Arc<ExerciseBundle>>>,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for SessionStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionStore")
            .field("exam_id", &self.config.exam_id)
            .field("namespace", &self.namespace)
            .finish()
    }
}

fn key(participant: &str, exercise: &str, revision: u32) -> String {
    format!("{participant}/{exercise}/{revision}")
}

impl SessionStore {
    /// Opens the session store of one exam instance. If the namespace already
    /// holds events (a restart), they are replayed; exercises added live are
    /// looked up in `pool`.
    pub fn open(
        config: Arc<ExamConfig>,
        pool: &ExercisePool,
        store: Arc<dyn DocumentStore>,
        namespace: impl Into<String>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SessionError> {
        let namespace = namespace.into();
        let mut events = Vec::new();
        for line in store.events(&namespace)? {
            let event: InteractionEvent = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                namespace: namespace.clone(),
                line: events.len() + 1,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        let state = replay(&config, &events, events.len() as u64)?;
        let mut bundles = BTreeMap::new();
        for id in &state.exercises {
            let bundle = pool.get(id).ok_or_else(|| SessionError::UnknownExercise(id.clone()))?;
            bundles.insert(id.clone(), Arc::new(bundle.clone()));
        }
        if store.get_latest(&namespace, CONFIG_COLLECTION, "exam.toml")?.is_none() {
            store.put(&namespace, CONFIG_COLLECTION, "exam.toml", &config.to_toml())?;
        }
        if !events.is_empty() {
            tracing::info!(exam = %config.exam_id, events = events.len(), "recovered session state from event log");
        }
        Ok(SessionStore {
            config,
            namespace,
            store,
            clock,
            bundles: RwLock::new(bundles),
            inner: Mutex::new(Inner {
                state,
                events,
                exported_seq: None,
                erased: false,
                recorder: None,
            }),
        })
    }

    pub fn config(&self) -> &ExamConfig {
        &self.config
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn document_store(&self) -> &Arc<dyn DocumentStore> {
        &self.store
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn set_recorder(&self, recorder: SnapshotRecorder) {
        self.lock().recorder = Some(recorder);
    }

    pub fn bundle(&self, id: &str) -> Option<Arc<ExerciseBundle>> {
        self.bundles.read().unwrap().get(id).cloned()
    }

    /// Exam bundles in exam order.
    pub fn bundles(&self) -> Vec<Arc<ExerciseBundle>> {
        let order = self.lock().state.exercises.clone();
        let bundles = self.bundles.read().unwrap();
        order.iter().filter_map(|id| bundles.get(id).cloned()).collect()
    }

    pub fn variant_for(&self, participant: &str, exercise: &str) -> Result<VariantInstance, SessionError> {
        let bundle = self
            .bundle(exercise)
            .ok_or_else(|| SessionError::UnknownExercise(exercise.into()))?;
        let seed = derive_seed(&self.config.randomization_salt, participant, exercise);
        Ok(instantiate_variant(&bundle, seed)?)
    }

    pub fn snapshot(&self) -> ExamState {
        self.lock().state.clone()
    }

    pub fn events(&self) -> Vec<InteractionEvent> {
        self.lock().events.clone()
    }

    pub fn last_seq(&self) -> u64 {
        self.lock().state.last_seq
    }

    pub fn session(&self, participant: &str) -> Result<SessionRecord, SessionError> {
        let inner = self.lock();
        inner
            .state
            .sessions
            .get(participant)
            .cloned()
            .ok_or_else(|| SessionError::UnknownParticipant(participant.into()))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap()
    }

    fn live(&self) -> Result<MutexGuard<'_, Inner>, SessionError> {
        let inner = self.lock();
        if inner.erased {
            return Err(SessionError::Erased);
        }
        Ok(inner)
    }

    fn commit(
        &self,
        inner: &mut Inner,
        at: DateTime<Utc>,
        actor: &Principal,
        session: Option<&str>,
        payload: EventPayload,
    ) -> Result<InteractionEvent, SessionError> {
        let event = InteractionEvent {
            seq: inner.state.last_seq + 1,
            at,
            actor: actor.clone(),
            session: session.map(str::to_owned),
            payload,
        };
        let line = serde_json::to_string(&event).expect("events serialize");
        if let (
            EventPayload::AnswerStored {
                exercise_id,
                revision,
                body,
            },
            Some(p),
        ) = (&event.payload, session)
        {
            self.store.put(
                &self.namespace,
                ANSWERS_COLLECTION,
                &key(p, exercise_id, *revision),
                body,
            )?;
        }
        self.store.append_event(&self.namespace, &line)?;
        apply(&mut inner.state, &event).map_err(ReplayError::from)?;
        inner.events.push(event.clone());
        if let Some(recorder) = inner.recorder.as_mut() {
            recorder(&event, &inner.state);
        }
        tracing::debug!(seq = event.seq, kind = event.payload.kind(), "event committed");
        Ok(event)
    }

    /// Validates and commits an event built from the current state. Used by
    /// modules layered on top (grading) for their own audit events.
    pub fn commit_with<E: From<SessionError>>(
        &self,
        actor: &Principal,
        session: Option<&str>,
        build: impl FnOnce(&ExamState) -> Result<EventPayload, E>,
    ) -> Result<InteractionEvent, E> {
        let mut inner = self.live()?;
        let payload = build(&inner.state)?;
        let at = self.clock.now();
        Ok(self.commit(&mut inner, at, actor, session, payload)?)
    }

    fn record_mut<'a>(inner: &'a Inner, participant: &str) -> Result<&'a SessionRecord, SessionError> {
        inner
            .state
            .sessions
            .get(participant)
            .ok_or_else(|| SessionError::UnknownParticipant(participant.into()))
    }

    fn wrong_state(record: &SessionRecord, operation: &'static str) -> SessionError {
        SessionError::WrongState {
            participant: record.participant_id.clone(),
            state: record.state,
            operation,
        }
    }

    pub fn authorize_station(&self, station_id: &str, by: &Principal) -> Result<StationRecord, SessionError> {
        require(by, AccessLevel::Supervisor)?;
        let mut inner = self.live()?;
        let at = self.clock.now();
        self.commit(
            &mut inner,
            at,
            by,
            None,
            EventPayload::StationAuthorized {
                station_id: station_id.into(),
            },
        )?;
        Ok(inner.state.stations[station_id].clone())
    }

    pub fn station(&self, station_id: &str) -> Option<StationRecord> {
        self.lock().state.stations.get(station_id).cloned()
    }

    /// Logs a participant in from an authorized station. A participant who is
    /// already logged in (for example after a reconnect) resumes where they
    /// were; the state does not change.
    pub fn login(
        &self,
        participant: &str,
        credential: Option<&str>,
        mode: LoginMode,
        by: Option<&Principal>,
        station_id: &str,
    ) -> Result<SessionRecord, SessionError> {
        let entry = self
            .config
            .participant(participant)
            .ok_or_else(|| SessionError::UnknownParticipant(participant.into()))?;
        let actor = match mode {
            LoginMode::Credential => {
                let ok = credential.is_some_and(|c| entry.credential_hash.verify(c));
                if !ok {
                    return Err(SessionError::BadCredential);
                }
                Principal::new(participant, AccessLevel::Participant)
            }
            LoginMode::SupervisorBypass => {
                let by = by.ok_or_else(|| AccessDenied {
                    principal: "anonymous".into(),
                    actual: AccessLevel::Participant,
                    required: AccessLevel::Supervisor,
                })?;
                require(by, AccessLevel::Supervisor)?;
                by.clone()
            }
        };
        let mut inner = self.live()?;
        if !inner.state.stations.get(station_id).is_some_and(|s| s.authorized) {
            return Err(SessionError::StationNotAuthorized(station_id.into()));
        }
        let record = Self::record_mut(&inner, participant)?;
        if record.state == SessionState::Submitted {
            return Err(Self::wrong_state(record, "log in"));
        }
        let at = self.clock.now();
        self.commit(
            &mut inner,
            at,
            &actor,
            Some(participant),
            EventPayload::Login {
                station_id: station_id.into(),
                mode,
            },
        )?;
        Ok(inner.state.sessions[participant].clone())
    }

    /// Checks a participant's credential without touching the session. Used
    /// for result download after the exam.
    pub fn verify_credential(&self, participant: &str, credential: &str) -> Result<(), SessionError> {
        let entry = self
            .config
            .participant(participant)
            .ok_or_else(|| SessionError::UnknownParticipant(participant.into()))?;
        if entry.credential_hash.verify(credential) {
            Ok(())
        } else {
            Err(SessionError::BadCredential)
        }
    }

    pub fn accept_terms(&self, participant: &str) -> Result<SessionRecord, SessionError> {
        let mut inner = self.live()?;
        let record = Self::record_mut(&inner, participant)?;
        if record.state != SessionState::LoggedIn {
            return Err(Self::wrong_state(record, "accept terms"));
        }
        let at = self.clock.now();
        let room = self.config.participant(participant).and_then(|p| p.room.as_deref());
        let start = self.config.timing.effective_start(room, at).ok_or_else(|| {
            SessionError::NoEffectiveStart(format!("no start time configured for the room of `{participant}`"))
        })?;
        let actor = Principal::new(participant, AccessLevel::Participant);
        self.commit(
            &mut inner,
            at,
            &actor,
            Some(participant),
            EventPayload::TermsAccepted { effective_start: start },
        )?;
        Ok(inner.state.sessions[participant].clone())
    }

    /// Displayed deadline of a session (without grace).
    pub fn deadline(&self, participant: &str) -> Result<DateTime<Utc>, SessionError> {
        let inner = self.lock();
        let record = Self::record_mut(&inner, participant)?;
        self.deadline_of(record)
    }

    fn deadline_of(&self, record: &SessionRecord) -> Result<DateTime<Utc>, SessionError> {
        self.config
            .timing
            .deadline(record.effective_start, record.extensions)
            .map_err(|e| SessionError::NoEffectiveStart(e.to_string()))
    }

    /// Stores a new revision of an answer. The body must be a JSON document;
    /// it is kept and returned exactly as sent.
    pub fn store_answer(&self, participant: &str, exercise_id: &str, body: &str) -> Result<u32, SessionError> {
        serde_json::from_str::<serde::de::IgnoredAny>(body).map_err(|e| SessionError::InvalidBody(e.to_string()))?;
        let mut inner = self.live()?;
        let at = self.clock.now();
        let record = Self::record_mut(&inner, participant)?;
        if record.state != SessionState::InProgress {
            return Err(Self::wrong_state(record, "store an answer"));
        }
        if !record.exercises.iter().any(|e| e == exercise_id) {
            return Err(SessionError::UnknownExercise(exercise_id.into()));
        }
        let start = record.effective_start.expect("in_progress sessions have a start");
        if at < start {
            return Err(SessionError::NotStarted { start });
        }
        let last_write = self.config.timing.last_write(self.deadline_of(record)?);
        if at > last_write {
            return Err(SessionError::AfterDeadline { last_write });
        }
        let revision = inner.state.revisions(participant, exercise_id).len() as u32 + 1;
        let actor = Principal::new(participant, AccessLevel::Participant);
        self.commit(
            &mut inner,
            at,
            &actor,
            Some(participant),
            EventPayload::AnswerStored {
                exercise_id: exercise_id.into(),
                revision,
                body: body.into(),
            },
        )?;
        Ok(revision)
    }

    pub fn load_answer(&self, participant: &str, exercise_id: &str) -> Result<Option<AnswerDocument>, SessionError> {
        let inner = self.live()?;
        let record = Self::record_mut(&inner, participant)?;
        if !record.exercises.iter().any(|e| e == exercise_id) {
            return Err(SessionError::UnknownExercise(exercise_id.into()));
        }
        Ok(inner.state.latest_answer(participant, exercise_id).cloned())
    }

    pub fn submit(&self, participant: &str, cause: SubmitCause) -> Result<SessionRecord, SessionError> {
        let actor = match cause {
            SubmitCause::Participant => Principal::new(participant, AccessLevel::Participant),
            SubmitCause::Deadline => Principal::system(),
        };
        let mut inner = self.live()?;
        let record = Self::record_mut(&inner, participant)?;
        if record.state != SessionState::InProgress {
            return Err(Self::wrong_state(record, "submit"));
        }
        let at = self.clock.now();
        self.commit(
            &mut inner,
            at,
            &actor,
            Some(participant),
            EventPayload::Submitted { cause },
        )?;
        Ok(inner.state.sessions[participant].clone())
    }

    pub fn extend_time(&self, participant: &str, minutes: u32, by: &Principal) -> Result<SessionRecord, SessionError> {
        require(by, AccessLevel::Supervisor)?;
        if minutes == 0 {
            return Err(SessionError::InvalidExtension);
        }
        let mut inner = self.live()?;
        let record = Self::record_mut(&inner, participant)?;
        if record.state != SessionState::InProgress {
            return Err(Self::wrong_state(record, "extend time"));
        }
        let at = self.clock.now();
        self.commit(
            &mut inner,
            at,
            by,
            Some(participant),
            EventPayload::TimeExtended { minutes },
        )?;
        Ok(inner.state.sessions[participant].clone())
    }

    pub fn mark_identity_checked(&self, participant: &str, by: &Principal) -> Result<SessionRecord, SessionError> {
        require(by, AccessLevel::Supervisor)?;
        let mut inner = self.live()?;
        Self::record_mut(&inner, participant)?;
        let at = self.clock.now();
        self.commit(&mut inner, at, by, Some(participant), EventPayload::IdentityChecked)?;
        Ok(inner.state.sessions[participant].clone())
    }

    /// Adds an exercise to a running exam. Every session that has not been
    /// submitted gets it appended; submitted sessions keep their set.
    pub fn add_exercise_live(&self, bundle: ExerciseBundle, by: &Principal) -> Result<Vec<String>, SessionError> {
        require(by, AccessLevel::Admin)?;
        let id = bundle.exercise_id.clone();
        let mut inner = self.live()?;
        if inner.state.exercises.contains(&id) {
            return Err(SessionError::DuplicateExercise(id));
        }
        self.bundles.write().unwrap().insert(id.clone(), Arc::new(bundle));
        let at = self.clock.now();
        self.commit(
            &mut inner,
            at,
            by,
            None,
            EventPayload::ExerciseAdded { exercise_id: id },
        )?;
        Ok(inner.state.exercises.clone())
    }

    /// Submits every in-progress session whose last write time has passed.
    /// Returns the participants submitted by this sweep.
    pub fn sweep(&self) -> Result<Vec<String>, SessionError> {
        let mut inner = self.live()?;
        let now = self.clock.now();
        let due: Vec<String> = inner
            .state
            .sessions
            .values()
            .filter(|s| s.state == SessionState::InProgress)
            .filter(|s| {
                self.deadline_of(s)
                    .map(|d| now >= self.config.timing.last_write(d))
                    .unwrap_or(false)
            })
            .map(|s| s.participant_id.clone())
            .collect();
        for participant in &due {
            self.commit(
                &mut inner,
                now,
                &Principal::system(),
                Some(participant),
                EventPayload::Submitted {
                    cause: SubmitCause::Deadline,
                },
            )?;
        }
        Ok(due)
    }

    /// Whether an export covers every event committed so far.
    pub fn export_is_fresh(&self) -> bool {
        let inner = self.lock();
        inner.exported_seq == Some(inner.state.last_seq)
    }

    /// Writes the export archive and records it as covering all events so
    /// far. The export itself is not an event.
    pub fn export_all(&self, dir: &std::path::Path, extras: &ExportExtras) -> Result<ExportArchive, SessionError> {
        let mut inner = self.live()?;
        let archive = export::write_archive(dir, self, &inner.state, &inner.events, extras)?;
        inner.exported_seq = Some(inner.state.last_seq);
        Ok(archive)
    }

    /// Removes every trace of this exam from storage. With `require_export`,
    /// refuses unless an export newer than the last event exists.
    pub fn erase_all(&self, require_export: bool) -> Result<(), SessionError> {
        let mut inner = self.lock();
        if inner.erased {
            return Ok(());
        }
        if require_export {
            match inner.exported_seq {
                None => return Err(SessionError::ExportRequired("no export exists".into())),
                Some(seq) if seq < inner.state.last_seq => {
                    return Err(SessionError::ExportRequired(format!(
                        "export covers events up to {seq} but the log is at {}",
                        inner.state.last_seq
                    )))
                }
                Some(_) => {}
            }
        }
        self.store.erase(&self.namespace)?;
        inner.erased = true;
        inner.events.clear();
        inner.recorder = None;
        inner.state = ExamState::initial(&ExamConfig {
            roster: Vec::new(),
            ..(*self.config).clone()
        });
        tracing::info!(exam = %self.config.exam_id, namespace = %self.namespace, "exam data erased");
        Ok(())
    }

    pub fn is_erased(&self) -> bool {
        self.lock().erased
    }
}

#[cfg(test)]
mod tests;
