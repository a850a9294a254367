//! Isolated execution of participant programs.
//!
//! [`SandboxService`] owns a bounded, participant-fair job queue and a pool of
//! worker threads. Each instance gets its own service; the isolation backend
//! (by default [`SubprocessBackend`]) may be shared.

mod backend;
mod types;

pub use backend::{Isolation, IsolationBackend, SubprocessBackend};
pub use types::*;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::exercise::{SuiteRequest, TestRunner};

/// Environment variable that may point at a sandbox service config file.
pub const SANDBOX_CONFIG_ENV: &str = "EXAMKIT_SANDBOX_CONFIG";

/// A configured compiler/runtime. `compile` may contain the placeholder
/// `{sources}`, which expands to the job's source files (filtered by
/// `source_suffix`). Interpreted profiles leave `compile` unset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolchainProfile {
    #[serde(default)]
    pub compile: Option<Vec<String>>,
    pub run: Vec<String>,
    #[serde(default)]
    pub source_suffix: Option<String>,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub compile_limits: Limits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_max_source_bytes")]
    pub max_source_bytes: usize,
    #[serde(default = "default_max_files")]
    pub max_files: usize,
    /// Parent directory for per-job scratch directories.
    #[serde(default)]
    pub scratch_dir: Option<PathBuf>,
    #[serde(default)]
    pub profiles: BTreeMap<String, ToolchainProfile>,
}

fn default_workers() -> usize {
    2
}
fn default_queue_capacity() -> usize {
    256
}
fn default_max_source_bytes() -> usize {
    256 * 1024
}
fn default_max_files() -> usize {
    32
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("unknown toolchain profile `{0}`")]
    UnknownToolchain(String),
    #[error("job rejected: {0}")]
    Rejected(String),
    #[error("sandbox busy, retry later (queue holds {0} jobs)")]
    QueueFull(usize),
    #[error("unknown or already collected ticket {0}")]
    UnknownTicket(u64),
    #[error("job {0} was cancelled")]
    Cancelled(u64),
    #[error("timed out waiting for job {0}")]
    WaitTimeout(u64),
    #[error("invalid sandbox configuration: {0}")]
    Config(String),
    #[error("sandbox service I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl SandboxConfig {
    pub fn parse(text: &str) -> Result<Self, SandboxError> {
        let config: SandboxConfig = toml::from_str(text).map_err(|e| SandboxError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), SandboxError> {
        if self.workers == 0 || self.queue_capacity == 0 {
            return Err(SandboxError::Config(
                "workers and queue_capacity must be positive".into(),
            ));
        }
        for (name, profile) in &self.profiles {
            if profile.run.is_empty() || profile.compile.as_ref().is_some_and(Vec::is_empty) {
                return Err(SandboxError::Config(format!("profile `{name}` has an empty command")));
            }
            profile
                .limits
                .validate()
                .and_then(|_| profile.compile_limits.validate())
                .map_err(|e| SandboxError::Config(format!("profile `{name}`: {e}")))?;
        }
        Ok(())
    }

    /// A configuration with a single C profile built on the system `cc`.
    pub fn with_c_profile() -> Self {
        let profile = ToolchainProfile {
            compile: Some(
                ["cc", "-std=c11", "-O1", "-o", "prog", "{sources}", "-lm"]
                    .map(String::from)
                    .to_vec(),
            ),
            run: vec!["./prog".into()],
            source_suffix: Some(".c".into()),
            limits: Limits {
                wall_time_ms: 5_000,
                cpu_time_secs: 4,
                memory_bytes: 256 * 1024 * 1024,
                ..Limits::default()
            },
            compile_limits: Limits::default(),
        };
        SandboxConfig {
            workers: default_workers(),
            queue_capacity: default_queue_capacity(),
            max_source_bytes: default_max_source_bytes(),
            max_files: default_max_files(),
            scratch_dir: None,
            profiles: BTreeMap::from([("c".to_owned(), profile)]),
        }
    }
}

/// A flat file name without path separators or leading dot.
pub fn is_safe_file_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Handle for a queued job. Each ticket's result is delivered exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ticket(pub u64);

enum Slot {
    Queued,
    Running,
    Done(JobResult),
    Cancelled,
}

#[derive(Default)]
struct Queue {
    /// Pending jobs per participant; workers rotate over `rotation`.
    pending: HashMap<String, VecDeque<(Ticket, SandboxJob)>>,
    rotation: VecDeque<String>,
    depth: usize,
    slots: HashMap<u64, Slot>,
    next_ticket: u64,
    shutdown: bool,
}

impl Queue {
    fn pop_fair(&mut self) -> Option<(Ticket, SandboxJob)> {
        while let Some(participant) = self.rotation.pop_front() {
            let Some(jobs) = self.pending.get_mut(&participant) else {
                continue;
            };
            let Some(next) = jobs.pop_front() else {
                self.pending.remove(&participant);
                continue;
            };
            if jobs.is_empty() {
                self.pending.remove(&participant);
            } else {
                self.rotation.push_back(participant);
            }
            self.depth -= 1;
            return Some(next);
        }
        None
    }
}

struct Shared {
    queue: Mutex<Queue>,
    work: Condvar,
    done: Condvar,
}

// Worker slots are process-wide so that two services sharing a backend never
// run concurrent jobs under the same uid.
static NEXT_SLOT: AtomicUsize = AtomicUsize::new(0);

pub struct SandboxService {
    config: SandboxConfig,
    shared: Arc<Shared>,
}

impl std::fmt::Debug for SandboxService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxService")
            .field("workers", &self.config.workers)
            .field("profiles", &self.config.profiles.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl SandboxService {
    /// Starts the worker pool with a fresh [`SubprocessBackend`].
    pub fn start(config: SandboxConfig) -> Result<Self, SandboxError> {
        let root = config
            .scratch_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("examkit-sandbox"));
        let backend = Arc::new(SubprocessBackend::new(root)?);
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: SandboxConfig, backend: Arc<dyn IsolationBackend>) -> Result<Self, SandboxError> {
        config.validate()?;
        let shared = Arc::new(Shared {
            queue: Mutex::new(Queue::default()),
            work: Condvar::new(),
            done: Condvar::new(),
        });
        for _ in 0..config.workers {
            let slot = NEXT_SLOT.fetch_add(1, Ordering::Relaxed) % 4096;
            let shared = Arc::clone(&shared);
            let backend = Arc::clone(&backend);
            let profiles = config.profiles.clone();
            thread::Builder::new()
                .name(format!("sandbox-{slot}"))
                .spawn(move || worker(slot, shared, backend, profiles))?;
        }
        Ok(SandboxService { config, shared })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn has_toolchain(&self, name: &str) -> bool {
        self.config.profiles.contains_key(name)
    }

    /// Validates and enqueues a job. Never blocks on execution.
    pub fn submit(&self, job: SandboxJob) -> Result<Ticket, SandboxError> {
        if !self.config.profiles.contains_key(&job.toolchain) {
            return Err(SandboxError::UnknownToolchain(job.toolchain));
        }
        if job.source_files.len() > self.config.max_files {
            return Err(SandboxError::Rejected(format!(
                "{} files exceed the limit of {}",
                job.source_files.len(),
                self.config.max_files
            )));
        }
        let size: usize = job.source_files.values().map(String::len).sum();
        if size > self.config.max_source_bytes {
            return Err(SandboxError::Rejected(format!(
                "{size} bytes of source exceed the limit of {}",
                self.config.max_source_bytes
            )));
        }
        if let Some(bad) = job.source_files.keys().find(|n| !is_safe_file_name(n)) {
            return Err(SandboxError::Rejected(format!("unsafe file name `{bad}`")));
        }
        if let Some(limits) = &job.limits {
            limits.validate().map_err(SandboxError::Rejected)?;
        }

        let mut q = self.shared.queue.lock().unwrap();
        if q.depth >= self.config.queue_capacity {
            return Err(SandboxError::QueueFull(q.depth));
        }
        q.next_ticket += 1;
        let ticket = Ticket(q.next_ticket);
        q.slots.insert(ticket.0, Slot::Queued);
        let participant = job.participant_id.clone();
        let jobs = q.pending.entry(participant.clone()).or_default();
        let fresh = jobs.is_empty();
        jobs.push_back((ticket, job));
        if fresh {
            q.rotation.push_back(participant);
        }
        q.depth += 1;
        drop(q);
        self.shared.work.notify_one();
        Ok(ticket)
    }

    /// Blocks until the job finishes and hands over its result. A second call
    /// with the same ticket fails with [`SandboxError::UnknownTicket`].
    pub fn await_result(&self, ticket: Ticket, timeout: Option<Duration>) -> Result<JobResult, SandboxError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut q = self.shared.queue.lock().unwrap();
        loop {
            match q.slots.get(&ticket.0) {
                None => return Err(SandboxError::UnknownTicket(ticket.0)),
                Some(Slot::Cancelled) => {
                    q.slots.remove(&ticket.0);
                    return Err(SandboxError::Cancelled(ticket.0));
                }
                Some(Slot::Done(_)) => {
                    let Some(Slot::Done(result)) = q.slots.remove(&ticket.0) else {
                        unreachable!()
                    };
                    return Ok(result);
                }
                Some(Slot::Queued | Slot::Running) => {}
            }
            q = match deadline {
                None => self.shared.done.wait(q).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(SandboxError::WaitTimeout(ticket.0));
                    }
                    self.shared.done.wait_timeout(q, d - now).unwrap().0
                }
            };
        }
    }

    /// Cancels a job that has not started yet. Returns whether it was removed.
    pub fn cancel(&self, ticket: Ticket) -> bool {
        let mut q = self.shared.queue.lock().unwrap();
        if !matches!(q.slots.get(&ticket.0), Some(Slot::Queued)) {
            return false;
        }
        let mut removed = false;
        for jobs in q.pending.values_mut() {
            if let Some(pos) = jobs.iter().position(|(t, _)| *t == ticket) {
                jobs.remove(pos);
                removed = true;
                break;
            }
        }
        if removed {
            q.depth -= 1;
            q.slots.insert(ticket.0, Slot::Cancelled);
            self.shared.done.notify_all();
        }
        removed
    }

    /// Jobs waiting for a worker.
    pub fn queue_depth(&self) -> usize {
        self.shared.queue.lock().unwrap().depth
    }

    /// Submits and waits in one call.
    pub fn run(&self, job: SandboxJob) -> Result<JobResult, SandboxError> {
        let ticket = self.submit(job)?;
        self.await_result(ticket, None)
    }
}

impl Drop for SandboxService {
    fn drop(&mut self) {
        self.shared.queue.lock().unwrap().shutdown = true;
        self.shared.work.notify_all();
    }
}

fn worker(
    slot: usize,
    shared: Arc<Shared>,
    backend: Arc<dyn IsolationBackend>,
    profiles: BTreeMap<String, ToolchainProfile>,
) {
    loop {
        let (ticket, job) = {
            let mut q = shared.queue.lock().unwrap();
            loop {
                if q.shutdown {
                    return;
                }
                if let Some(next) = q.pop_fair() {
                    q.slots.insert(next.0 .0, Slot::Running);
                    break next;
                }
                q = shared.work.wait(q).unwrap();
            }
        };
        let result = match profiles.get(&job.toolchain) {
            Some(profile) => {
                let outcome =
                    std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| backend.execute(slot, &job, profile)));
                outcome.unwrap_or_else(|_| JobResult::infra_error("isolation backend panicked"))
            }
            None => JobResult::infra_error(format!("toolchain `{}` disappeared", job.toolchain)),
        };
        tracing::debug!(ticket = ticket.0, status = ?result.status, "sandbox job finished");
        shared.queue.lock().unwrap().slots.insert(ticket.0, Slot::Done(result));
        shared.done.notify_all();
    }
}

impl TestRunner for SandboxService {
    fn run_suite(&self, request: &SuiteRequest) -> Result<JobResult, String> {
        let job = SandboxJob {
            exam_id: String::new(),
            participant_id: request.participant_id.clone(),
            source_files: request.files.clone(),
            toolchain: request.toolchain.clone(),
            action: JobAction::UnitTests {
                suite: request.suite.clone(),
            },
            limits: None,
        };
        self.run(job).map_err(|e| e.to_string())
    }
}
