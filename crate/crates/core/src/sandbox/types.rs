use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Resource limits for one job. All values are enforced by the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub wall_time_ms: u64,
    pub cpu_time_secs: u64,
    pub memory_bytes: u64,
    pub output_bytes: u64,
    pub processes: u32,
}

impl Limits {
    pub fn validate(&self) -> Result<(), String> {
        if self.wall_time_ms == 0
            || self.cpu_time_secs == 0
            || self.memory_bytes == 0
            || self.output_bytes == 0
            || self.processes == 0
        {
            return Err("all limits must be positive".into());
        }
        Ok(())
    }
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            wall_time_ms: 10_000,
            cpu_time_secs: 10,
            memory_bytes: 512 * 1024 * 1024,
            output_bytes: 64 * 1024,
            processes: 32,
        }
    }
}

/// One input/output test: the program runs with `args` and `stdin`, and its
/// standard output must equal `expected_stdout` (trailing whitespace on each
/// line and trailing blank lines are ignored).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    #[serde(default)]
    pub stdin: String,
    pub expected_stdout: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    /// Reference to the exercise whose assessment spec holds the suite.
    pub suite_ref: String,
    pub tests: Vec<TestCase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JobAction {
    Compile,
    CompileAndRun { stdin: String },
    UnitTests { suite: TestSuite },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxJob {
    pub exam_id: String,
    /// Used for fair queueing across participants.
    pub participant_id: String,
    pub source_files: BTreeMap<String, String>,
    pub toolchain: String,
    pub action: JobAction,
    /// Overrides the toolchain profile's defaults when set.
    #[serde(default)]
    pub limits: Option<Limits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Ok,
    CompileError,
    RuntimeError,
    Timeout,
    ResourceExceeded,
    InfraError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_id: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub wall_time_ms: u64,
    pub cpu_time_ms: u64,
    pub max_rss_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    pub status: JobStatus,
    pub compiler_output: String,
    pub program_output: String,
    /// Present iff the action was `unit_tests`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_outcomes: Option<Vec<TestOutcome>>,
    pub usage: ResourceUsage,
}

impl JobResult {
    pub fn infra_error(message: impl Into<String>) -> Self {
        JobResult {
            status: JobStatus::InfraError,
            compiler_output: String::new(),
            program_output: message.into(),
            test_outcomes: None,
            usage: ResourceUsage::default(),
        }
    }

    pub fn passed_count(&self) -> usize {
        self.test_outcomes
            .as_ref()
            .map_or(0, |t| t.iter().filter(|o| o.passed).count())
    }
}

/// Marker appended to output that hit the output limit.
pub fn truncation_marker(limit: u64) -> String {
    format!("\n[output truncated at {limit} bytes]\n")
}
