//! The exam configuration file.
//!
//! One TOML document per exam controls the whole examination: which exercises
//! of the pool are used and in which order, the timing policy, the roster of
//! authorized participants, staff role grants and the grade chart.
//!
//! ```toml
//! exam_id = "algo-2026"
//! title = "Algorithms and Data Structures"
//! exercises = ["sorting-mc", "sum-numeric"]
//! randomization_salt = "spring-2026"
//! terms_text = "I confirm that I work on my own."
//!
//! [timing]
//! start = "global"                 # "global" | "per_room" | "per_acceptance"
//! start_at = "2026-10-16T10:00:00Z"
//! duration_minutes = 90
//! grace_seconds = 0                # optional, default 0
//!
//! [[roster]]
//! participant_id = "p01"
//! display_name = "Ada Lovelace"
//! matriculation_no = "100001"
//! credential_hash = "sha256$<salt>$<hex>"
//!
//! [role_grants]                    # optional, default empty
//! alice = "admin"
//!
//! [grade_chart]
//! pass_threshold = 50
//! fail_label = "5.0"
//! boundaries = [
//!   { min_points = 95, label = "1.0" },
//!   { min_points = 50, label = "4.0" },
//! ]
//! ```
//!
//! Grade boundaries are inclusive at `min_points`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{AccessLevel, CredentialHash};
use crate::points::Points;

/// Name of the configuration file inside an exam directory.
pub const CONFIG_FILE: &str = "exam.toml";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("exam_id `{0}` must be non-empty and contain only ASCII letters, digits, `-` or `_`")]
    InvalidExamId(String),
    #[error("exercise list must not be empty")]
    NoExercises,
    #[error("exercise `{0}` is referenced more than once")]
    DuplicateExerciseRef(String),
    #[error("exercise `{0}` does not exist in the exercise pool")]
    UnresolvedExerciseRef(String),
    #[error("participant `{0}` appears more than once in the roster")]
    DuplicateParticipant(String),
    #[error("matriculation number `{0}` appears more than once in the roster")]
    DuplicateMatriculation(String),
    #[error("invalid timing policy: {0}")]
    Timing(String),
    #[error("invalid grade chart: {0}")]
    GradeChart(String),
    #[error("invalid roster entry `{participant}`: {message}")]
    Roster { participant: String, message: String },
}

/// Lookup of exercise ids used to resolve `exercises` references.
pub trait PoolIndex {
    fn contains_exercise(&self, id: &str) -> bool;
}

impl PoolIndex for BTreeSet<String> {
    fn contains_exercise(&self, id: &str) -> bool {
        self.contains(id)
    }
}

impl PoolIndex for [&str] {
    fn contains_exercise(&self, id: &str) -> bool {
        self.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartMode {
    Global(DateTime<Utc>),
    PerRoom(BTreeMap<String, DateTime<Utc>>),
    PerAcceptance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingPolicy {
    pub start_mode: StartMode,
    pub duration_minutes: u32,
    pub grace_seconds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no effective start: terms have not been accepted")]
pub struct NoEffectiveStart;

impl TimingPolicy {
    /// Start time that applies to a participant who accepted the terms at
    /// `accepted_at`. For global and per-room modes this is the configured
    /// start, even if the participant accepted earlier.
    pub fn effective_start(&self, room: Option<&str>, accepted_at: DateTime<Utc>) -> Option<DateTime<Utc>> {
        match &self.start_mode {
            StartMode::Global(start) => Some(*start),
            StartMode::PerRoom(starts) => room.and_then(|r| starts.get(r)).copied(),
            StartMode::PerAcceptance => Some(accepted_at),
        }
    }

    /// Displayed deadline: `start + duration + extensions`. Grace is not
    /// included; see [`TimingPolicy::last_write`].
    pub fn deadline(
        &self,
        effective_start: Option<DateTime<Utc>>,
        extension_minutes: u32,
    ) -> Result<DateTime<Utc>, NoEffectiveStart> {
        let start = effective_start.ok_or(NoEffectiveStart)?;
        Ok(start + Duration::minutes(i64::from(self.duration_minutes) + i64::from(extension_minutes)))
    }

    /// Last instant at which an answer write is still accepted.
    pub fn last_write(&self, deadline: DateTime<Utc>) -> DateTime<Utc> {
        deadline + Duration::seconds(i64::from(self.grace_seconds))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantEntry {
    pub participant_id: String,
    pub display_name: String,
    pub matriculation_no: String,
    pub credential_hash: CredentialHash,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeBoundary {
    pub min_points: Points,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeChart {
    pub pass_threshold: Points,
    pub fail_label: String,
    /// Strictly descending in `min_points`; the last equals `pass_threshold`.
    pub boundaries: Vec<GradeBoundary>,
}

impl GradeChart {
    pub fn new(
        pass_threshold: Points,
        fail_label: impl Into<String>,
        boundaries: Vec<GradeBoundary>,
    ) -> Result<Self, ConfigError> {
        let chart = GradeChart {
            pass_threshold,
            fail_label: fail_label.into(),
            boundaries,
        };
        chart.validate()?;
        Ok(chart)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::GradeChart(m));
        if self.pass_threshold.is_negative() {
            return err("pass_threshold must be >= 0".into());
        }
        let Some(last) = self.boundaries.last() else {
            return err("at least one boundary is required".into());
        };
        for pair in self.boundaries.windows(2) {
            if pair[0].min_points <= pair[1].min_points {
                return err(format!(
                    "boundaries must be strictly descending ({} then {})",
                    pair[0].min_points, pair[1].min_points
                ));
            }
        }
        if last.min_points != self.pass_threshold {
            return err(format!(
                "lowest boundary ({}) must equal pass_threshold ({})",
                last.min_points, self.pass_threshold
            ));
        }
        Ok(())
    }

    pub fn passes(&self, total: Points) -> bool {
        total >= self.pass_threshold
    }
}

/// Label of the highest boundary whose `min_points <= total`; totals below the
/// pass threshold map to the fail label.
pub fn grade_for(total: Points, chart: &GradeChart) -> &str {
    chart
        .boundaries
        .iter()
        .find(|b| b.min_points <= total)
        .map(|b| b.label.as_str())
        .unwrap_or(chart.fail_label.as_str())
}

/// A validated exam configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamConfig {
    pub exam_id: String,
    pub title: String,
    pub exercise_refs: Vec<String>,
    pub timing: TimingPolicy,
    pub roster: Vec<ParticipantEntry>,
    pub role_grants: BTreeMap<String, AccessLevel>,
    pub grade_chart: GradeChart,
    pub randomization_salt: String,
    pub terms_text: String,
}

impl ExamConfig {
    pub fn participant(&self, participant_id: &str) -> Option<&ParticipantEntry> {
        self.roster.iter().find(|p| p.participant_id == participant_id)
    }

    pub fn level_of(&self, principal: &str) -> Option<AccessLevel> {
        self.role_grants.get(principal).copied()
    }

    /// Serializes back to the configuration file format.
    pub fn to_toml(&self) -> String {
        toml::to_string(&RawConfig::from(self)).expect("configuration is always serializable")
    }
}

impl fmt::Display for ExamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.title, self.exam_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    exam_id: String,
    title: String,
    exercises: Vec<String>,
    randomization_salt: String,
    #[serde(default)]
    terms_text: String,
    timing: RawTiming,
    #[serde(default)]
    roster: Vec<ParticipantEntry>,
    #[serde(default)]
    role_grants: BTreeMap<String, AccessLevel>,
    grade_chart: GradeChart,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTiming {
    start: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    room_starts: Option<BTreeMap<String, DateTime<Utc>>>,
    duration_minutes: u32,
    #[serde(default)]
    grace_seconds: u32,
}

impl From<&ExamConfig> for RawConfig {
    fn from(c: &ExamConfig) -> Self {
        let (start, start_at, room_starts) = match &c.timing.start_mode {
            StartMode::Global(at) => ("global", Some(*at), None),
            StartMode::PerRoom(rooms) => ("per_room", None, Some(rooms.clone())),
            StartMode::PerAcceptance => ("per_acceptance", None, None),
        };
        RawConfig {
            exam_id: c.exam_id.clone(),
            title: c.title.clone(),
            exercises: c.exercise_refs.clone(),
            randomization_salt: c.randomization_salt.clone(),
            terms_text: c.terms_text.clone(),
            timing: RawTiming {
                start: start.to_owned(),
                start_at,
                room_starts,
                duration_minutes: c.timing.duration_minutes,
                grace_seconds: c.timing.grace_seconds,
            },
            roster: c.roster.clone(),
            role_grants: c.role_grants.clone(),
            grade_chart: c.grade_chart.clone(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

pub fn is_safe_token(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Parses and validates a configuration document against the exercise pool.
pub fn parse_config<P: PoolIndex + ?Sized>(text: &str, pool: &P) -> Result<ExamConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |span| line_col(text, span.start));
        ConfigError::Syntax {
            line,
            column,
            message: e.message().to_owned(),
        }
    })?;
    validate(raw, pool)
}

fn validate<P: PoolIndex + ?Sized>(raw: RawConfig, pool: &P) -> Result<ExamConfig, ConfigError> {
    if !is_safe_token(&raw.exam_id) {
        return Err(ConfigError::InvalidExamId(raw.exam_id));
    }
    if raw.exercises.is_empty() {
        return Err(ConfigError::NoExercises);
    }
    let mut seen = BTreeSet::new();
    for id in &raw.exercises {
        if !seen.insert(id.as_str()) {
            return Err(ConfigError::DuplicateExerciseRef(id.clone()));
        }
        if !pool.contains_exercise(id) {
            return Err(ConfigError::UnresolvedExerciseRef(id.clone()));
        }
    }

    let timing = validate_timing(raw.timing)?;

    let mut ids = BTreeSet::new();
    let mut matriculation = BTreeSet::new();
    for entry in &raw.roster {
        if !is_safe_token(&entry.participant_id) {
            return Err(ConfigError::Roster {
                participant: entry.participant_id.clone(),
                message: "participant_id must be a non-empty token of letters, digits, `-`, `_`".into(),
            });
        }
        if !ids.insert(entry.participant_id.as_str()) {
            return Err(ConfigError::DuplicateParticipant(entry.participant_id.clone()));
        }
        if !matriculation.insert(entry.matriculation_no.as_str()) {
            return Err(ConfigError::DuplicateMatriculation(entry.matriculation_no.clone()));
        }
        if let StartMode::PerRoom(rooms) = &timing.start_mode {
            match &entry.room {
                Some(room) if rooms.contains_key(room) => {}
                Some(room) => {
                    return Err(ConfigError::Roster {
                        participant: entry.participant_id.clone(),
                        message: format!("room `{room}` has no start time"),
                    })
                }
                None => {
                    return Err(ConfigError::Roster {
                        participant: entry.participant_id.clone(),
                        message: "per_room timing requires a room".into(),
                    })
                }
            }
        }
    }

    raw.grade_chart.validate()?;

    Ok(ExamConfig {
        exam_id: raw.exam_id,
        title: raw.title,
        exercise_refs: raw.exercises,
        timing,
        roster: raw.roster,
        role_grants: raw.role_grants,
        grade_chart: raw.grade_chart,
        randomization_salt: raw.randomization_salt,
        terms_text: raw.terms_text,
    })
}

fn validate_timing(raw: RawTiming) -> Result<TimingPolicy, ConfigError> {
    let err = |m: &str| Err(ConfigError::Timing(m.to_owned()));
    if raw.duration_minutes == 0 {
        return err("duration_minutes must be > 0");
    }
    let start_mode = match raw.start.as_str() {
        "global" => {
            if raw.room_starts.is_some() {
                return err("room_starts is only allowed with start = \"per_room\"");
            }
            match raw.start_at {
                Some(at) => StartMode::Global(at),
                None => return err("start = \"global\" requires start_at"),
            }
        }
        "per_room" => {
            if raw.start_at.is_some() {
                return err("start_at is only allowed with start = \"global\"");
            }
            match raw.room_starts {
                Some(rooms) if !rooms.is_empty() => StartMode::PerRoom(rooms),
                _ => return err("start = \"per_room\" requires a non-empty room_starts table"),
            }
        }
        "per_acceptance" => {
            if raw.start_at.is_some() || raw.room_starts.is_some() {
                return err("start = \"per_acceptance\" carries no start timestamps");
            }
            StartMode::PerAcceptance
        }
        other => {
            return Err(ConfigError::Timing(format!(
                "unknown start mode `{other}` (expected global, per_room or per_acceptance)"
            )))
        }
    };
    Ok(TimingPolicy {
        start_mode,
        duration_minutes: raw.duration_minutes,
        grace_seconds: raw.grace_seconds,
    })
}

/// Returns exercise ids in `exercise_refs` order together with the matching
/// pool entries; unreferenced pool entries are excluded.
pub fn select_exercises<'a, T>(config: &ExamConfig, pool: &'a BTreeMap<String, T>) -> Vec<&'a T> {
    config.exercise_refs.iter().filter_map(|id| pool.get(id)).collect()
}
