//! Exam state, interaction events and the pure transition function.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::access::Principal;
use crate::config::ExamConfig;
use crate::points::Points;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Registered,
    LoggedIn,
    /// Part of the declared state machine, but acceptance moves a session
    /// straight on to `in_progress`, so no session ever rests here.
    TermsAccepted,
    InProgress,
    Submitted,
}

impl SessionState {
    pub const ALL: [SessionState; 5] = [
        SessionState::Registered,
        SessionState::LoggedIn,
        SessionState::TermsAccepted,
        SessionState::InProgress,
        SessionState::Submitted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Registered => "registered",
            SessionState::LoggedIn => "logged_in",
            SessionState::TermsAccepted => "terms_accepted",
            SessionState::InProgress => "in_progress",
            SessionState::Submitted => "submitted",
        }
    }

    /// The declared edges. Self-loops are not transitions.
    pub fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Registered, LoggedIn)
                | (LoggedIn, TermsAccepted)
                | (LoggedIn, InProgress)
                | (TermsAccepted, InProgress)
                | (InProgress, Submitted)
        )
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoginMode {
    Credential,
    SupervisorBypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitCause {
    Participant,
    Deadline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub at: DateTime<Utc>,
    pub cause: SubmitCause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub participant_id: String,
    pub station_id: Option<String>,
    pub state: SessionState,
    pub accepted_at: Option<DateTime<Utc>>,
    pub effective_start: Option<DateTime<Utc>>,
    pub extensions: u32,
    pub identity_checked: bool,
    pub login_mode: Option<LoginMode>,
    /// Exercises of this participant's exam instance, in exam order.
    pub exercises: Vec<String>,
    pub submission: Option<Submission>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub authorized: bool,
    pub authorized_by: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerDocument {
    pub exercise_id: String,
    pub revision: u32,
    /// Exactly the text the client sent.
    pub body: String,
    pub stored_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualScore {
    pub score: Points,
    pub explanation: String,
    pub by: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BonusRecord {
    pub participant_id: String,
    pub points: Points,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum ReleaseState {
    Draft,
    Cleared { cleared_by: String, at: DateTime<Utc> },
    Distributed { cleared_by: String, at: DateTime<Utc> },
}

impl ReleaseState {
    pub fn is_cleared(&self) -> bool {
        !matches!(self, ReleaseState::Draft)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    Email,
    Portal,
}

/// Everything the event log determines. Two states are equal iff every field
/// is equal, which is what the replay oracle compares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamState {
    pub last_seq: u64,
    pub exercises: Vec<String>,
    pub stations: BTreeMap<String, StationRecord>,
    pub sessions: BTreeMap<String, SessionRecord>,
    /// participant → exercise → revisions in order.
    pub answers: BTreeMap<String, BTreeMap<String, Vec<AnswerDocument>>>,
    pub manual_scores: BTreeMap<String, BTreeMap<String, ManualScore>>,
    pub bonus: BTreeMap<String, Vec<BonusRecord>>,
    pub evaluation_runs: u32,
    pub release: ReleaseState,
    pub delivered: BTreeSet<String>,
}

impl ExamState {
    pub fn initial(config: &ExamConfig) -> Self {
        let sessions = config
            .roster
            .iter()
            .map(|p| {
                (
                    p.participant_id.clone(),
                    SessionRecord {
                        participant_id: p.participant_id.clone(),
                        station_id: None,
                        state: SessionState::Registered,
                        accepted_at: None,
                        effective_start: None,
                        extensions: 0,
                        identity_checked: false,
                        login_mode: None,
                        exercises: config.exercise_refs.clone(),
                        submission: None,
                    },
                )
            })
            .collect();
        ExamState {
            last_seq: 0,
            exercises: config.exercise_refs.clone(),
            stations: BTreeMap::new(),
            sessions,
            answers: BTreeMap::new(),
            manual_scores: BTreeMap::new(),
            bonus: BTreeMap::new(),
            evaluation_runs: 0,
            release: ReleaseState::Draft,
            delivered: BTreeSet::new(),
        }
    }

    pub fn latest_answer(&self, participant: &str, exercise: &str) -> Option<&AnswerDocument> {
        self.answers.get(participant)?.get(exercise)?.last()
    }

    pub fn revisions(&self, participant: &str, exercise: &str) -> &[AnswerDocument] {
        self.answers
            .get(participant)
            .and_then(|m| m.get(exercise))
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    pub fn bonus_total(&self, participant: &str) -> Points {
        self.bonus
            .get(participant)
            .map(|records| records.iter().map(|r| r.points).sum())
            .unwrap_or(Points::ZERO)
    }

    pub fn count_in(&self, state: SessionState) -> usize {
        self.sessions.values().filter(|s| s.state == state).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    StationAuthorized {
        station_id: String,
    },
    Login {
        station_id: String,
        mode: LoginMode,
    },
    TermsAccepted {
        effective_start: DateTime<Utc>,
    },
    AnswerStored {
        exercise_id: String,
        revision: u32,
        body: String,
    },
    Submitted {
        cause: SubmitCause,
    },
    TimeExtended {
        minutes: u32,
    },
    IdentityChecked,
    ExerciseAdded {
        exercise_id: String,
    },
    Evaluated {
        needs_rerun: u32,
    },
    ManualScore {
        exercise_id: String,
        score: Points,
        explanation: String,
    },
    BonusAwarded {
        points: Points,
        note: String,
    },
    Released,
    Distributed {
        mode: DistributionMode,
        delivered: Vec<String>,
        failed: Vec<String>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::StationAuthorized { .. } => "station_authorized",
            EventPayload::Login { .. } => "login",
            EventPayload::TermsAccepted { .. } => "terms_accepted",
            EventPayload::AnswerStored { .. } => "answer_stored",
            EventPayload::Submitted { .. } => "submitted",
            EventPayload::TimeExtended { .. } => "time_extended",
            EventPayload::IdentityChecked => "identity_checked",
            EventPayload::ExerciseAdded { .. } => "exercise_added",
            EventPayload::Evaluated { .. } => "evaluated",
            EventPayload::ManualScore { .. } => "manual_score",
            EventPayload::BonusAwarded { .. } => "bonus_awarded",
            EventPayload::Released => "released",
            EventPayload::Distributed { .. } => "distributed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub actor: Principal,
    /// Participant whose session the event concerns, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("event {got} out of order, expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("event {seq}: {message}")]
    Inconsistent { seq: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("event log corrupt: missing {0}")]
    Gap(u64),
    #[error(transparent)]
    Apply(#[from] ApplyError),
}

/// Folds one event into the state. The event must be the next in sequence and
/// consistent with the state; the state is left untouched otherwise.
pub fn apply(state: &mut ExamState, event: &InteractionEvent) -> Result<(), ApplyError> {
    let expected = state.last_seq + 1;
    if event.seq != expected {
        return Err(ApplyError::OutOfOrder {
            expected,
            got: event.seq,
        });
    }
    let bad = |message: String| ApplyError::Inconsistent {
        seq: event.seq,
        message,
    };
    let session_id = || event.session.clone().ok_or_else(|| bad("event needs a session".into()));

    match &event.payload {
        EventPayload::StationAuthorized { station_id } => {
            state.stations.insert(
                station_id.clone(),
                StationRecord {
                    station_id: station_id.clone(),
                    authorized: true,
                    authorized_by: event.actor.id.clone(),
                    at: event.at,
                },
            );
        }
        EventPayload::Login { station_id, mode } => {
            let id = session_id()?;
            let session = state
                .sessions
                .get_mut(&id)
                .ok_or_else(|| bad(format!("unknown session {id}")))?;
            if session.state == SessionState::Submitted {
                return Err(bad("login on a submitted session".into()));
            }
            if session.state == SessionState::Registered {
                session.state = SessionState::LoggedIn;
            }
            session.station_id = Some(station_id.clone());
            session.login_mode = Some(*mode);
        }
        EventPayload::TermsAccepted { effective_start } => {
            let id = session_id()?;
            let session = state
                .sessions
                .get_mut(&id)
                .ok_or_else(|| bad(format!("unknown session {id}")))?;
            if session.state != SessionState::LoggedIn {
                return Err(bad(format!("terms accepted in state {}", session.state)));
            }
            session.state = SessionState::InProgress;
            session.accepted_at = Some(event.at);
            session.effective_start = Some(*effective_start);
        }
        EventPayload::AnswerStored {
            exercise_id,
            revision,
            body,
        } => {
            let id = session_id()?;
            let session = state
                .sessions
                .get(&id)
                .ok_or_else(|| bad(format!("unknown session {id}")))?;
            if session.state != SessionState::InProgress {
                return Err(bad(format!("answer stored in state {}", session.state)));
            }
            if !session.exercises.contains(exercise_id) {
                return Err(bad(format!("exercise {exercise_id} not in session")));
            }
            let revisions = state
                .answers
                .entry(id)
                .or_default()
                .entry(exercise_id.clone())
                .or_default();
            if *revision as usize != revisions.len() + 1 {
                return Err(bad(format!("revision {revision} after {}", revisions.len())));
            }
            revisions.push(AnswerDocument {
                exercise_id: exercise_id.clone(),
                revision: *revision,
                body: body.clone(),
                stored_at: event.at,
            });
        }
        EventPayload::Submitted { cause } => {
            let id = session_id()?;
            let session = state
                .sessions
                .get_mut(&id)
                .ok_or_else(|| bad(format!("unknown session {id}")))?;
            if session.state != SessionState::InProgress {
                return Err(bad(format!("submit in state {}", session.state)));
            }
            session.state = SessionState::Submitted;
            session.submission = Some(Submission {
                at: event.at,
                cause: *cause,
            });
        }
        EventPayload::TimeExtended { minutes } => {
            let id = session_id()?;
            let session = state
                .sessions
                .get_mut(&id)
                .ok_or_else(|| bad(format!("unknown session {id}")))?;
            if session.state != SessionState::InProgress || *minutes == 0 {
                return Err(bad(format!("extension of {minutes} in state {}", session.state)));
            }
            session.extensions += minutes;
        }
        EventPayload::IdentityChecked => {
            let id = session_id()?;
            let session = state
                .sessions
                .get_mut(&id)
                .ok_or_else(|| bad(format!("unknown session {id}")))?;
            session.identity_checked = true;
        }
        EventPayload::ExerciseAdded { exercise_id } => {
            if state.exercises.contains(exercise_id) {
                return Err(bad(format!("exercise {exercise_id} already present")));
            }
            state.exercises.push(exercise_id.clone());
            for session in state.sessions.values_mut() {
                if session.state != SessionState::Submitted {
                    session.exercises.push(exercise_id.clone());
                }
            }
        }
        EventPayload::Evaluated { .. } => state.evaluation_runs += 1,
        EventPayload::ManualScore {
            exercise_id,
            score,
            explanation,
        } => {
            let id = session_id()?;
            if state.release.is_cleared() {
                return Err(bad("manual score after clearing".into()));
            }
            state.manual_scores.entry(id).or_default().insert(
                exercise_id.clone(),
                ManualScore {
                    score: *score,
                    explanation: explanation.clone(),
                    by: event.actor.id.clone(),
                    at: event.at,
                },
            );
        }
        EventPayload::BonusAwarded { points, note } => {
            let id = session_id()?;
            if state.release.is_cleared() {
                return Err(bad("bonus after clearing".into()));
            }
            state.bonus.entry(id.clone()).or_default().push(BonusRecord {
                participant_id: id,
                points: *points,
                note: note.clone(),
            });
        }
        EventPayload::Released => {
            if state.release.is_cleared() {
                return Err(bad("already cleared".into()));
            }
            state.release = ReleaseState::Cleared {
                cleared_by: event.actor.id.clone(),
                at: event.at,
            };
        }
        EventPayload::Distributed { delivered, .. } => {
            let cleared_by = match &state.release {
                ReleaseState::Draft => return Err(bad("distribution before clearing".into())),
                ReleaseState::Cleared { cleared_by, .. } | ReleaseState::Distributed { cleared_by, .. } => {
                    cleared_by.clone()
                }
            };
            state.release = ReleaseState::Distributed {
                cleared_by,
                at: event.at,
            };
            state.delivered.extend(delivered.iter().cloned());
        }
    }
    state.last_seq = event.seq;
    Ok(())
}

/// Rebuilds the state after event `upto` from the initial state. Events must
/// be numbered 1, 2, 3, … without gaps up to `upto`.
pub fn replay(config: &ExamConfig, events: &[InteractionEvent], upto: u64) -> Result<ExamState, ReplayError> {
    let mut state = ExamState::initial(config);
    let mut expected = 1;
    for event in events {
        if expected > upto {
            break;
        }
        if event.seq != expected {
            return Err(ReplayError::Gap(expected));
        }
        apply(&mut state, event)?;
        expected += 1;
    }
    if expected <= upto {
        return Err(ReplayError::Gap(expected));
    }
    Ok(state)
}
