//! The bundled demo exam under `fixtures/`, plus the conventions its roster
//! and staff files follow. Examples and tests use it; nothing else depends on
//! it.
//!
//! Participant `pNN` logs in with `pw-pNN`; staff principal `X` with
//! `staff-X`.

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};

use crate::access::{AccessLevel, Principal, StaffDirectory};
use crate::config::{parse_config, ExamConfig, CONFIG_FILE};
use crate::exercise::ExercisePool;
use crate::sandbox::SandboxConfig;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn exam_dir() -> PathBuf {
    fixtures_dir().join("demo-exam")
}

/// Small C programs used to exercise the sandbox.
pub fn program(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join("programs").join(name))
        .unwrap_or_else(|e| panic!("fixture program {name}: {e}"))
}

/// Reference solution of the programming exercise.
pub fn reference_solution() -> String {
    std::fs::read_to_string(exam_dir().join("exercises/e5/reference/main.c")).expect("reference solution")
}

pub fn pool() -> ExercisePool {
    ExercisePool::load_dir(&exam_dir().join("exercises")).expect("demo exercise pool")
}

pub fn config(pool: &ExercisePool) -> ExamConfig {
    let text = std::fs::read_to_string(exam_dir().join(CONFIG_FILE)).expect("demo exam.toml");
    parse_config(&text, pool).expect("demo exam.toml is valid")
}

pub fn sandbox_config() -> SandboxConfig {
    SandboxConfig::load(&fixtures_dir().join("sandbox.toml")).expect("demo sandbox.toml")
}

pub fn staff() -> StaffDirectory {
    let text = std::fs::read_to_string(fixtures_dir().join("staff.toml")).expect("demo staff.toml");
    StaffDirectory::from_toml(&text).expect("demo staff.toml is valid")
}

pub fn credential(participant: &str) -> String {
    format!("pw-{participant}")
}

pub fn staff_credential(principal: &str) -> String {
    format!("staff-{principal}")
}

pub fn supervisor() -> Principal {
    Principal::new("sup1", AccessLevel::Supervisor)
}

pub fn admin() -> Principal {
    Principal::new("admin1", AccessLevel::Admin)
}

/// A fixed instant on the demo exam day.
pub fn at(hour: u32, minute: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 10, 16, hour, minute, 0).unwrap()
}

pub fn shared_config(pool: &ExercisePool) -> Arc<ExamConfig> {
    Arc::new(config(pool))
}

/// Strings that only occur in assessment specs of the demo pool: rule and
/// test-suite field names plus the hidden test inputs and outputs of the
/// programming exercise. None of them may appear in a participant-scope
/// response.
pub fn assessment_markers() -> Vec<String> {
    let mut markers: Vec<String> = [
        "\"correct\"",
        "\"rules\"",
        "\"target\"",
        "\"tolerance\"",
        "partial_credit",
        "expected_stdout",
        "\"weight\"",
        "\"assessment\"",
        "sandboxed",
        "declarative",
    ]
    .map(String::from)
    .to_vec();
    let pool = pool();
    for bundle in pool.bundles().values() {
        if let crate::exercise::AssessmentSpec::Sandboxed { tests, .. } = &bundle.assessment {
            for t in tests {
                markers.push(
                    serde_json::to_string(&t.case.stdin)
                        .unwrap()
                        .trim_matches('"')
                        .to_owned(),
                );
            }
        }
    }
    markers
}
