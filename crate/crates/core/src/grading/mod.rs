//! Batch evaluation, manual scores, bonus points, reports and release.
//!
//! Automatic results come from [`crate::exercise::assess`] run against each
//! participant's own variant. Sandbox verdicts pass through a
//! [`TranscriptRunner`], so evaluating again (also from an export archive)
//! reuses the recorded verdicts and produces the same gradebook byte for byte.
//! Manual scores, bonus points, clearing and distribution are events in the
//! session log; the gradebook is recomputed from those events and the cached
//! automatic results.

mod distribute;
mod report;
mod transcript;

pub use distribute::{Attachment, DeliveryFailure, DistributionLog, FileOutbox, MailTransport};
pub use report::{assemble_report, Overview, OverviewRow, Report, ReportHeader, ReportSection, PAGE_BREAK};
pub use transcript::{transcript_key, TranscriptRunner, TRANSCRIPTS_COLLECTION};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::access::{require, AccessDenied, AccessLevel, Principal};
use crate::clock::ManualClock;
use crate::config::{grade_for, parse_config, ExamConfig};
use crate::exercise::{assess, AssessmentResult, ExercisePool, SubScore, TestRunner};
use crate::points::Points;
use crate::session::{
    BonusRecord, DistributionMode, EventPayload, ExamState, ExportArchive, ExportExtras, ManualScore, SessionError,
    SessionState, SessionStore,
};
use crate::store::{DocumentStore, MemoryStore, Record};

#[derive(Debug, thiserror::Error)]
pub enum GradingError {
    #[error(transparent)]
    Access(#[from] AccessDenied),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("sessions not yet submitted: {}", .0.join(", "))]
    NotSubmitted(Vec<String>),
    #[error("the exam has not been evaluated")]
    NotEvaluated,
    #[error("results are cleared and can no longer change")]
    Frozen,
    #[error("score {score} is outside 0..={max}")]
    OutOfRange { score: Points, max: Points },
    #[error("{participant}/{exercise} is scored automatically")]
    NotManual { participant: String, exercise: String },
    #[error("{exercise} is not part of the exam of {participant}")]
    UnknownExercise { participant: String, exercise: String },
    #[error("unknown participant `{0}`")]
    UnknownParticipant(String),
    #[error("clearing blocked by: {}", .0.join("; "))]
    Blocked(Vec<String>),
    #[error("results have not been cleared")]
    NotCleared,
    #[error("report of {participant} is incomplete: {}", .slots.join("; "))]
    Incomplete { participant: String, slots: Vec<String> },
    #[error("email distribution needs a mail transport")]
    NoTransport,
    #[error("archive: {0}")]
    Archive(String),
}

impl GradingError {
    pub fn code(&self) -> &'static str {
        match self {
            GradingError::Access(_) => "forbidden",
            GradingError::Session(e) => e.code(),
            GradingError::NotSubmitted(_) => "not_submitted",
            GradingError::NotEvaluated => "not_evaluated",
            GradingError::Frozen => "frozen",
            GradingError::OutOfRange { .. } => "out_of_range",
            GradingError::NotManual { .. } => "not_manual",
            GradingError::UnknownExercise { .. } => "unknown_exercise",
            GradingError::UnknownParticipant(_) => "unknown_participant",
            GradingError::Blocked(_) => "clearing_blocked",
            GradingError::NotCleared => "not_cleared",
            GradingError::Incomplete { .. } => "incomplete",
            GradingError::NoTransport => "no_transport",
            GradingError::Archive(_) => "archive_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Auto,
    Manual,
    NeedsRerun,
}

/// One (participant, exercise) slot. `result` is `None` for a manual
/// exercise that has not been scored yet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExerciseGrade {
    pub exercise_id: String,
    pub origin: Origin,
    pub result: Option<AssessmentResult>,
}

impl ExerciseGrade {
    pub fn score(&self) -> Points {
        match (&self.result, self.origin) {
            (Some(r), Origin::Auto | Origin::Manual) => r.score,
            _ => Points::ZERO,
        }
    }

    pub fn is_blocking(&self) -> bool {
        self.result.is_none() || self.origin == Origin::NeedsRerun
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeBookEntry {
    pub participant_id: String,
    pub per_exercise: Vec<ExerciseGrade>,
    pub bonus: Points,
    pub total: Points,
    pub grade_label: String,
}

impl GradeBookEntry {
    pub fn slot(&self, exercise: &str) -> Option<&ExerciseGrade> {
        self.per_exercise.iter().find(|s| s.exercise_id == exercise)
    }

    /// Slots that keep the entry from being complete, as `participant/exercise: why`.
    pub fn blocking_slots(&self) -> Vec<String> {
        self.per_exercise
            .iter()
            .filter(|s| s.is_blocking())
            .map(|s| {
                let why = if s.origin == Origin::NeedsRerun {
                    "needs rerun"
                } else {
                    "manual score missing"
                };
                format!("{}/{}: {why}", self.participant_id, s.exercise_id)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeBook {
    pub exam_id: String,
    pub title: String,
    /// Every exercise of the exam in order, including ones added live.
    pub exercises: Vec<String>,
    pub entries: Vec<GradeBookEntry>,
}

impl GradeBook {
    pub fn entry(&self, participant: &str) -> Option<&GradeBookEntry> {
        self.entries.iter().find(|e| e.participant_id == participant)
    }

    pub fn blocking_slots(&self) -> Vec<String> {
        self.entries.iter().flat_map(GradeBookEntry::blocking_slots).collect()
    }

    pub fn needs_rerun(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|e| &e.per_exercise)
            .filter(|s| s.origin == Origin::NeedsRerun)
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gradebooks serialize")
    }
}

/// Header of the spreadsheet export: `participant_id`, `matriculation_no`,
/// one column per exercise id, then `bonus`, `total` and `grade`. Cells of
/// exercises that are not part of a participant's instance are empty.
pub fn spreadsheet(book: &GradeBook, config: &ExamConfig) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["participant_id".to_owned(), "matriculation_no".to_owned()];
    header.extend(book.exercises.iter().cloned());
    header.extend(["bonus", "total", "grade"].map(String::from));
    out.write_record(&header).expect("in-memory write");
    for entry in &book.entries {
        let matriculation = config
            .participant(&entry.participant_id)
            .map(|p| p.matriculation_no.clone())
            .unwrap_or_default();
        let mut row = vec![entry.participant_id.clone(), matriculation];
        for exercise in &book.exercises {
            row.push(match entry.slot(exercise) {
                Some(slot) if !slot.is_blocking() => slot.score().to_string(),
                _ => String::new(),
            });
        }
        row.push(entry.bonus.to_string());
        row.push(entry.total.to_string());
        row.push(entry.grade_label.clone());
        out.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(out.into_inner().expect("in-memory flush")).expect("csv of strings is utf-8")
}

/// Reads bonus records from CSV with the header `participant_id,points,note`.
pub fn parse_bonus_csv(text: &str) -> Result<Vec<BonusRecord>, String> {
    #[derive(Deserialize)]
    struct Row {
        participant_id: String,
        points: Points,
        #[serde(default)]
        note: String,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .deserialize::<Row>()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| format!("row {}: {e}", i + 1))?;
            Ok(BonusRecord {
                participant_id: row.participant_id,
                points: row.points,
                note: row.note,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BonusImport {
    pub applied: Vec<String>,
    pub issues: Vec<String>,
}

type AutoResults = BTreeMap<String, BTreeMap<String, AssessmentResult>>;

/// Grading front end of one exam instance.
pub struct Grader {
    session: Arc<SessionStore>,
    runner: TranscriptRunner,
    /// Automatic results of the last evaluation, per participant.
    auto: Mutex<Option<AutoResults>>,
    parallelism: usize,
}

impl std::fmt::Debug for Grader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grader").field("session", &self.session).finish()
    }
}

fn manual_result(max_points: Points, exercise: &str, answered: bool, m: &ManualScore) -> AssessmentResult {
    AssessmentResult {
        exercise_id: exercise.to_owned(),
        score: m.score,
        max_points,
        answered,
        subscores: vec![SubScore {
            id: "manual".into(),
            awarded: m.score,
            possible: max_points,
            explanation: m.explanation.clone(),
        }],
        test_outcomes: None,
        compiler_output: None,
        needs_rerun: false,
    }
}

impl Grader {
    /// `live` runs suites that have no recorded transcript yet. Pass `None` to
    /// grade strictly from transcripts.
    pub fn new(session: Arc<SessionStore>, live: Option<Arc<dyn TestRunner>>) -> Self {
        let runner = TranscriptRunner::new(session.document_store().clone(), session.namespace(), live);
        let parallelism = std::thread::available_parallelism().map_or(2, |n| n.get()).min(8);
        Grader {
            session,
            runner,
            auto: Mutex::new(None),
            parallelism,
        }
    }

    pub fn session(&self) -> &Arc<SessionStore> {
        &self.session
    }

    pub fn transcripts(&self) -> &TranscriptRunner {
        &self.runner
    }

    /// Evaluates every submitted session and records an `evaluated` event.
    /// Unless `force` is set, all sessions must be submitted.
    pub fn evaluate_exam(&self, by: &Principal, force: bool) -> Result<GradeBook, GradingError> {
        require(by, AccessLevel::Admin)?;
        let book = self.compute(force)?;
        let needs_rerun = book.needs_rerun() as u32;
        self.session.commit_with(by, None, |state: &ExamState| {
            if state.release.is_cleared() {
                return Err(GradingError::Frozen);
            }
            Ok(EventPayload::Evaluated { needs_rerun })
        })?;
        tracing::info!(entries = book.entries.len(), needs_rerun, "exam evaluated");
        Ok(book)
    }

    /// Runs the automatic assessment without recording an event.
    pub fn compute(&self, force: bool) -> Result<GradeBook, GradingError> {
        let state = self.session.snapshot();
        if state.release.is_cleared() {
            return Err(GradingError::Frozen);
        }
        let open: Vec<String> = state
            .sessions
            .values()
            .filter(|s| s.state != SessionState::Submitted)
            .map(|s| s.participant_id.clone())
            .collect();
        if !open.is_empty() && !force {
            return Err(GradingError::NotSubmitted(open));
        }
        let participants: Vec<&str> = state
            .sessions
            .values()
            .filter(|s| s.state == SessionState::Submitted)
            .map(|s| s.participant_id.as_str())
            .collect();

        let next = AtomicUsize::new(0);
        let collected = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..self.parallelism.min(participants.len()).max(1) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(p) = participants.get(i) else { break };
                    let outcome = self.evaluate_participant(&state, p);
                    collected.lock().unwrap().push((p.to_string(), outcome));
                });
            }
        });
        let mut auto = AutoResults::new();
        for (p, outcome) in collected.into_inner().unwrap() {
            auto.insert(p, outcome?);
        }
        *self.auto.lock().unwrap() = Some(auto);
        self.gradebook_from(&state)
    }

    fn evaluate_participant(
        &self,
        state: &ExamState,
        participant: &str,
    ) -> Result<BTreeMap<String, AssessmentResult>, GradingError> {
        let mut results = BTreeMap::new();
        for exercise in &state.sessions[participant].exercises {
            let bundle = self.bundle(participant, exercise)?;
            if bundle.assessment.is_manual() {
                continue;
            }
            let variant = self.session.variant_for(participant, exercise)?;
            let answer = state.latest_answer(participant, exercise).map(|a| a.body.as_str());
            let result = assess(&bundle, &variant, answer, &self.runner, participant)
                .expect("manual exercises are skipped above");
            results.insert(exercise.clone(), result);
        }
        Ok(results)
    }

    fn bundle(&self, participant: &str, exercise: &str) -> Result<Arc<crate::exercise::ExerciseBundle>, GradingError> {
        self.session
            .bundle(exercise)
            .ok_or_else(|| GradingError::UnknownExercise {
                participant: participant.into(),
                exercise: exercise.into(),
            })
    }

    /// The current gradebook. After a restart the automatic part is rebuilt
    /// from transcripts if the log shows an earlier evaluation.
    pub fn gradebook(&self) -> Result<GradeBook, GradingError> {
        let state = self.session.snapshot();
        if self.auto.lock().unwrap().is_none() {
            if state.evaluation_runs == 0 {
                return Err(GradingError::NotEvaluated);
            }
            self.rebuild_auto(&state)?;
        }
        self.gradebook_from(&state)
    }

    fn rebuild_auto(&self, state: &ExamState) -> Result<(), GradingError> {
        let mut auto = AutoResults::new();
        for s in state.sessions.values().filter(|s| s.state == SessionState::Submitted) {
            auto.insert(
                s.participant_id.clone(),
                self.evaluate_participant(state, &s.participant_id)?,
            );
        }
        *self.auto.lock().unwrap() = Some(auto);
        Ok(())
    }

    fn gradebook_from(&self, state: &ExamState) -> Result<GradeBook, GradingError> {
        let guard = self.auto.lock().unwrap();
        let auto = guard.as_ref().ok_or(GradingError::NotEvaluated)?;
        let config = self.session.config();
        let mut entries = Vec::new();
        for (participant, results) in auto {
            let session = &state.sessions[participant];
            let manual = state.manual_scores.get(participant);
            let mut per_exercise = Vec::new();
            for exercise in &session.exercises {
                let bundle = self.bundle(participant, exercise)?;
                let answered = state.latest_answer(participant, exercise).is_some();
                let override_ = manual
                    .and_then(|m| m.get(exercise))
                    .map(|m| manual_result(bundle.max_points, exercise, answered, m));
                let grade = match (results.get(exercise), override_) {
                    (None, result) => ExerciseGrade {
                        exercise_id: exercise.clone(),
                        origin: Origin::Manual,
                        result,
                    },
                    (Some(r), Some(m)) if r.needs_rerun => ExerciseGrade {
                        exercise_id: exercise.clone(),
                        origin: Origin::Manual,
                        result: Some(m),
                    },
                    (Some(r), _) => ExerciseGrade {
                        exercise_id: exercise.clone(),
                        origin: if r.needs_rerun {
                            Origin::NeedsRerun
                        } else {
                            Origin::Auto
                        },
                        result: Some(r.clone()),
                    },
                };
                per_exercise.push(grade);
            }
            let bonus = state.bonus_total(participant);
            let total = (per_exercise.iter().map(ExerciseGrade::score).sum::<Points>() + bonus).clamp_non_negative();
            entries.push(GradeBookEntry {
                participant_id: participant.clone(),
                grade_label: grade_for(total, &config.grade_chart).to_owned(),
                per_exercise,
                bonus,
                total,
            });
        }
        Ok(GradeBook {
            exam_id: config.exam_id.clone(),
            title: config.title.clone(),
            exercises: state.exercises.clone(),
            entries,
        })
    }

    /// Fills a manual slot, or overrides a slot whose sandbox run failed.
    pub fn set_manual_score(
        &self,
        participant: &str,
        exercise: &str,
        score: Points,
        explanation: &str,
        by: &Principal,
    ) -> Result<GradeBookEntry, GradingError> {
        require(by, AccessLevel::Admin)?;
        let book = self.gradebook()?;
        let slot = book
            .entry(participant)
            .ok_or_else(|| GradingError::UnknownParticipant(participant.into()))?
            .slot(exercise)
            .ok_or_else(|| GradingError::UnknownExercise {
                participant: participant.into(),
                exercise: exercise.into(),
            })?;
        let bundle = self.bundle(participant, exercise)?;
        let failed_run = self
            .auto
            .lock()
            .unwrap()
            .as_ref()
            .and_then(|a| a.get(participant)?.get(exercise).map(|r| r.needs_rerun))
            .unwrap_or(false);
        if !bundle.assessment.is_manual() && !failed_run {
            return Err(GradingError::NotManual {
                participant: participant.into(),
                exercise: exercise.into(),
            });
        }
        debug_assert!(slot.origin != Origin::Auto);
        if score.is_negative() || score > bundle.max_points {
            return Err(GradingError::OutOfRange {
                score,
                max: bundle.max_points,
            });
        }
        self.session.commit_with(by, Some(participant), |state: &ExamState| {
            if state.release.is_cleared() {
                return Err(GradingError::Frozen);
            }
            Ok(EventPayload::ManualScore {
                exercise_id: exercise.into(),
                score,
                explanation: explanation.into(),
            })
        })?;
        let book = self.gradebook()?;
        book.entry(participant)
            .cloned()
            .ok_or_else(|| GradingError::UnknownParticipant(participant.into()))
    }

    /// Applies bonus records. Records for unknown participants or with
    /// negative points are reported and skipped; the others are applied.
    pub fn import_bonus(&self, records: &[BonusRecord], by: &Principal) -> Result<BonusImport, GradingError> {
        require(by, AccessLevel::Admin)?;
        if self.session.snapshot().release.is_cleared() {
            return Err(GradingError::Frozen);
        }
        let mut report = BonusImport::default();
        for record in records {
            if self.session.config().participant(&record.participant_id).is_none() {
                report
                    .issues
                    .push(format!("{}: not in the roster", record.participant_id));
                continue;
            }
            if record.points.is_negative() {
                report
                    .issues
                    .push(format!("{}: negative bonus {}", record.participant_id, record.points));
                continue;
            }
            self.session
                .commit_with(by, Some(&record.participant_id), |state: &ExamState| {
                    if state.release.is_cleared() {
                        return Err(GradingError::Frozen);
                    }
                    Ok(EventPayload::BonusAwarded {
                        points: record.points,
                        note: record.note.clone(),
                    })
                })?;
            report.applied.push(record.participant_id.clone());
        }
        Ok(report)
    }

    /// Freezes the results. Refused while any slot needs a rerun or a manual
    /// score, or while a submitted session has not been evaluated.
    pub fn clear_and_release(&self, by: &Principal) -> Result<crate::session::ReleaseState, GradingError> {
        require(by, AccessLevel::Admin)?;
        self.gradebook()?;
        self.session.commit_with(by, None, |state: &ExamState| {
            if state.release.is_cleared() {
                return Err(GradingError::Frozen);
            }
            let book = self.gradebook_from(state)?;
            let mut blocking = book.blocking_slots();
            for s in state.sessions.values().filter(|s| s.state == SessionState::Submitted) {
                if book.entry(&s.participant_id).is_none() {
                    blocking.push(format!("{}: submitted after the last evaluation", s.participant_id));
                }
            }
            if !blocking.is_empty() {
                return Err(GradingError::Blocked(blocking));
            }
            Ok(EventPayload::Released)
        })?;
        tracing::info!(by = %by.id, "results cleared");
        Ok(self.session.snapshot().release)
    }

    pub fn report(&self, participant: &str) -> Result<Report, GradingError> {
        let book = self.gradebook()?;
        let entry = book
            .entry(participant)
            .ok_or_else(|| GradingError::UnknownParticipant(participant.into()))?;
        assemble_report(entry, &self.session)
    }

    /// A participant's own report, available only after clearing.
    pub fn download_report(&self, participant: &str) -> Result<Report, GradingError> {
        if !self.session.snapshot().release.is_cleared() {
            return Err(GradingError::NotCleared);
        }
        self.report(participant)
    }

    /// Sends every report that has not been delivered yet. In portal mode the
    /// reports are marked available for download instead. Per-recipient
    /// failures are logged and can be retried by calling this again.
    pub fn distribute(
        &self,
        mode: DistributionMode,
        transport: Option<&dyn MailTransport>,
        by: &Principal,
    ) -> Result<DistributionLog, GradingError> {
        require(by, AccessLevel::Admin)?;
        let state = self.session.snapshot();
        if !state.release.is_cleared() {
            return Err(GradingError::NotCleared);
        }
        if mode == DistributionMode::Email && transport.is_none() {
            return Err(GradingError::NoTransport);
        }
        let book = self.gradebook()?;
        let config = self.session.config();
        let mut log = DistributionLog {
            mode,
            delivered: Vec::new(),
            failed: Vec::new(),
        };
        for entry in book
            .entries
            .iter()
            .filter(|e| !state.delivered.contains(&e.participant_id))
        {
            let p = &entry.participant_id;
            let outcome = match (mode, transport) {
                (DistributionMode::Portal, _) => Ok(()),
                (DistributionMode::Email, Some(transport)) => {
                    let address = config.participant(p).and_then(|e| e.email.clone());
                    match address {
                        None => Err("no email address in the roster".to_owned()),
                        Some(address) => assemble_report(entry, &self.session)
                            .map_err(|e| e.to_string())
                            .and_then(|report| {
                                let attachment = Attachment {
                                    file_name: report.file_name(),
                                    content: report.render(),
                                };
                                transport.send(&address, &format!("Results: {}", config.title), &attachment)
                            }),
                    }
                }
                (DistributionMode::Email, None) => unreachable!("checked above"),
            };
            match outcome {
                Ok(()) => log.delivered.push(p.clone()),
                Err(reason) => log.failed.push(DeliveryFailure {
                    participant_id: p.clone(),
                    reason,
                }),
            }
        }
        let delivered = log.delivered.clone();
        let failed = log.failed.iter().map(|f| f.participant_id.clone()).collect();
        self.session.commit_with(by, None, |_: &ExamState| {
            Ok::<_, GradingError>(EventPayload::Distributed {
                mode,
                delivered,
                failed,
            })
        })?;
        tracing::info!(
            delivered = log.delivered.len(),
            failed = log.failed.len(),
            ?mode,
            "distribution run"
        );
        Ok(log)
    }

    /// Gradebook, spreadsheet and complete reports for an export archive.
    /// Without an evaluation the archive simply carries no results.
    pub fn export_extras(&self, mode: &str, source_ref: &str) -> ExportExtras {
        let mut extras = ExportExtras {
            mode: mode.into(),
            source_ref: source_ref.into(),
            ..ExportExtras::default()
        };
        if let Ok(book) = self.gradebook() {
            extras.results_csv = Some(spreadsheet(&book, self.session.config()));
            extras.gradebook_json = Some(book.to_json());
            for entry in &book.entries {
                if let Ok(report) = assemble_report(entry, &self.session) {
                    extras.reports.insert(entry.participant_id.clone(), report.render());
                }
            }
        }
        extras
    }
}

/// Grades an export archive again from its stored data and recorded sandbox
/// transcripts, without executing any participant code. `pool` must hold
/// every exercise the exam used. Returns the gradebook and the spreadsheet.
pub fn reevaluate_archive(archive: &ExportArchive, pool: &ExercisePool) -> Result<(GradeBook, String), GradingError> {
    let config = parse_config(&archive.config_text()?, pool).map_err(|e| GradingError::Archive(e.to_string()))?;
    let store = Arc::new(MemoryStore::new());
    const NS: &str = "archive";
    for record in archive.store_dump()? {
        match record {
            Record::Document { collection, key, body } => store.put(NS, &collection, &key, &body),
            Record::Event { body } => store.append_event(NS, &body),
        }
        .map_err(SessionError::from)?;
    }
    let clock = Arc::new(ManualClock::new(archive.manifest.exported_at));
    let session = Arc::new(SessionStore::open(Arc::new(config), pool, store, NS, clock)?);
    let grader = Grader::new(session.clone(), None);
    grader.rebuild_auto(&session.snapshot())?;
    let book = grader.gradebook()?;
    let csv = spreadsheet(&book, session.config());
    Ok((book, csv))
}
