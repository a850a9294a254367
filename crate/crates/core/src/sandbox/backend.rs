//! Subprocess isolation backend.
//!
//! Every job runs in a fresh scratch directory that is deleted afterwards.
//! Limits are applied with `setrlimit` before `exec`, and the wall clock is
//! enforced by the supervising thread, which kills the whole process group.
//!
//! When the host allows it (root with `unshare` and `setpriv`), the job also
//! gets its own network namespace (no interfaces, so no network), its own PID
//! namespace with a private `/proc`, and runs under a dedicated uid per
//! worker slot whose scratch directory is not accessible to other jobs.
//! Otherwise the backend falls back to a per-slot uid (root only) or plain
//! subprocesses; [`SubprocessBackend::isolation`] reports which one is active.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::types::*;
use super::ToolchainProfile;

const SAFE_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";
const SLOT_UID_BASE: u32 = 61_000;

/// Executes one job for a worker slot. Implementations must leave no residue
/// between jobs.
pub trait IsolationBackend: Send + Sync {
    fn execute(&self, slot: usize, job: &SandboxJob, profile: &ToolchainProfile) -> JobResult;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolation {
    /// Network + PID + mount namespaces and a per-slot uid.
    Namespaces,
    /// Per-slot uid only.
    SlotUid,
    /// Scratch directory and resource limits only.
    Basic,
}

#[derive(Debug)]
pub struct SubprocessBackend {
    scratch_root: PathBuf,
    isolation: Isolation,
    counter: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Code(i32),
    Signal(i32),
}

#[derive(Debug)]
struct ExecOutcome {
    exit: Exit,
    timed_out: bool,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    truncated: bool,
    usage: ResourceUsage,
}

impl SubprocessBackend {
    /// Probes the host and picks the strongest available isolation.
    pub fn new(scratch_root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let scratch_root = scratch_root.into();
        fs::create_dir_all(&scratch_root)?;
        fs::set_permissions(&scratch_root, fs::Permissions::from_mode(0o711))?;
        let isolation = probe_isolation();
        tracing::info!(?isolation, root = %scratch_root.display(), "sandbox backend ready");
        Ok(SubprocessBackend {
            scratch_root,
            isolation,
            counter: AtomicU64::new(0),
        })
    }

    pub fn with_isolation(scratch_root: impl Into<PathBuf>, isolation: Isolation) -> std::io::Result<Self> {
        let mut backend = Self::new(scratch_root)?;
        backend.isolation = isolation;
        Ok(backend)
    }

    pub fn isolation(&self) -> Isolation {
        self.isolation
    }

    fn slot_uid(&self, slot: usize) -> Option<u32> {
        match self.isolation {
            Isolation::Basic => None,
            _ => Some(SLOT_UID_BASE + slot as u32),
        }
    }

    fn prepare_dir(&self, uid: Option<u32>, files: &BTreeMap<String, String>) -> std::io::Result<PathBuf> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let dir = self.scratch_root.join(format!("job-{}-{n}", std::process::id()));
        fs::create_dir(&dir)?;
        for (name, content) in files {
            fs::write(dir.join(name), content)?;
        }
        if let Some(uid) = uid {
            chown_recursive(&dir, uid)?;
        }
        fs::set_permissions(&dir, fs::Permissions::from_mode(0o700))?;
        Ok(dir)
    }

    fn run(
        &self,
        argv: &[String],
        cwd: &Path,
        stdin: &[u8],
        limits: &Limits,
        uid: Option<u32>,
    ) -> std::io::Result<ExecOutcome> {
        let mut cmd = match (self.isolation, uid) {
            (Isolation::Namespaces, Some(uid)) => {
                let mut c = Command::new("unshare");
                c.args([
                    "--net",
                    "--pid",
                    "--fork",
                    "--kill-child",
                    "--mount-proc",
                    "--",
                    "setpriv",
                ])
                .arg(format!("--reuid={uid}"))
                .arg(format!("--regid={uid}"))
                .args(["--clear-groups", "--no-new-privs", "--"])
                .args(argv);
                c
            }
            _ => {
                let mut c = Command::new(&argv[0]);
                c.args(&argv[1..]);
                c
            }
        };
        cmd.current_dir(cwd)
            .env_clear()
            .env("PATH", SAFE_PATH)
            .env("HOME", cwd)
            .env("LANG", "C")
            .env("TMPDIR", cwd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());

        let limits = *limits;
        let drop_to = if self.isolation == Isolation::SlotUid {
            uid
        } else {
            None
        };
        // The process limit counts every process of the real uid, so it is
        // only meaningful once jobs run under their own slot uid.
        let limit_procs = uid.is_some();
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setpgid(0, 0) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                set_limit(libc::RLIMIT_CPU, limits.cpu_time_secs, limits.cpu_time_secs + 1)?;
                set_limit(libc::RLIMIT_AS, limits.memory_bytes, limits.memory_bytes)?;
                set_limit(libc::RLIMIT_FSIZE, limits.memory_bytes, limits.memory_bytes)?;
                if limit_procs {
                    set_limit(
                        libc::RLIMIT_NPROC,
                        u64::from(limits.processes),
                        u64::from(limits.processes),
                    )?;
                }
                set_limit(libc::RLIMIT_CORE, 0, 0)?;
                if let Some(uid) = drop_to {
                    if libc::setgroups(0, std::ptr::null()) != 0 || libc::setgid(uid) != 0 || libc::setuid(uid) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                }
                Ok(())
            });
        }

        let started = Instant::now();
        let mut child = cmd.spawn()?;
        let pid = child.id() as libc::pid_t;

        let mut child_stdin = child.stdin.take().expect("piped");
        let input = stdin.to_vec();
        thread::spawn(move || {
            let _ = child_stdin.write_all(&input);
        });
        let out = Capture::start(child.stdout.take().expect("piped"), limits.output_bytes);
        let err = Capture::start(child.stderr.take().expect("piped"), limits.output_bytes);

        let wall = Duration::from_millis(limits.wall_time_ms);
        let mut timed_out = false;
        let mut status: libc::c_int = 0;
        // SAFETY: rusage is plain old data.
        let mut rusage: libc::rusage = unsafe { std::mem::zeroed() };
        loop {
            // SAFETY: waiting on our own child with valid out-pointers.
            let r = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut rusage) };
            if r == pid {
                break;
            }
            if r < 0 {
                let e = std::io::Error::last_os_error();
                if e.kind() == std::io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(e);
            }
            if !timed_out && started.elapsed() >= wall {
                timed_out = true;
                // SAFETY: signalling the job's own process group.
                unsafe {
                    libc::kill(-pid, libc::SIGKILL);
                }
            }
            thread::sleep(Duration::from_millis(5));
        }
        let elapsed = started.elapsed();
        if self.isolation != Isolation::Namespaces {
            // SAFETY: reap any stragglers left in the job's process group.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
        }

        let exit = if libc::WIFSIGNALED(status) {
            Exit::Signal(libc::WTERMSIG(status))
        } else {
            Exit::Code(libc::WEXITSTATUS(status))
        };
        let (stdout, t1) = out.finish();
        let (stderr, t2) = err.finish();
        let cpu_ms = tv_ms(rusage.ru_utime) + tv_ms(rusage.ru_stime);
        Ok(ExecOutcome {
            exit,
            timed_out,
            stdout,
            stderr,
            truncated: t1 || t2,
            usage: ResourceUsage {
                wall_time_ms: elapsed.as_millis() as u64,
                cpu_time_ms: cpu_ms,
                max_rss_bytes: rusage.ru_maxrss.max(0) as u64 * 1024,
            },
        })
    }

    fn cleanup(&self, dir: &Path, uid: Option<u32>) {
        if self.isolation == Isolation::SlotUid {
            if let Some(uid) = uid {
                kill_all_of_uid(uid);
            }
        }
        if let Err(e) = fs::remove_dir_all(dir) {
            tracing::warn!(dir = %dir.display(), error = %e, "could not remove scratch directory");
        }
    }
}

fn tv_ms(tv: libc::timeval) -> u64 {
    (tv.tv_sec.max(0) as u64) * 1000 + (tv.tv_usec.max(0) as u64) / 1000
}

fn set_limit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    // SAFETY: valid pointer to a stack value.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

fn chown_recursive(path: &Path, uid: u32) -> std::io::Result<()> {
    std::os::unix::fs::chown(path, Some(uid), Some(uid))?;
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            chown_recursive(&entry?.path(), uid)?;
        }
    }
    Ok(())
}

fn kill_all_of_uid(uid: u32) {
    let mut cmd = Command::new("/bin/kill");
    cmd.args(["-9", "-1"]).stdout(Stdio::null()).stderr(Stdio::null());
    // SAFETY: async-signal-safe calls only.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setgid(uid) != 0 || libc::setuid(uid) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let _ = cmd.status();
}

fn probe_isolation() -> Isolation {
    // SAFETY: geteuid has no preconditions.
    if unsafe { libc::geteuid() } != 0 {
        return Isolation::Basic;
    }
    let probe = Command::new("unshare")
        .args([
            "--net",
            "--pid",
            "--fork",
            "--kill-child",
            "--mount-proc",
            "--",
            "setpriv",
        ])
        .arg(format!("--reuid={SLOT_UID_BASE}"))
        .arg(format!("--regid={SLOT_UID_BASE}"))
        .args(["--clear-groups", "--no-new-privs", "--", "true"])
        .env_clear()
        .env("PATH", SAFE_PATH)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status();
    match probe {
        Ok(s) if s.success() => Isolation::Namespaces,
        _ => Isolation::SlotUid,
    }
}

/// Bounded reader for a child pipe: keeps the first `limit` bytes and drains
/// the rest so the child never blocks on a full pipe.
struct Capture {
    buffer: Arc<Mutex<(Vec<u8>, bool, bool)>>,
}

impl Capture {
    fn start(mut source: impl Read + Send + 'static, limit: u64) -> Self {
        let buffer = Arc::new(Mutex::new((Vec::new(), false, false)));
        let shared = Arc::clone(&buffer);
        thread::spawn(move || {
            let mut chunk = [0u8; 8192];
            loop {
                match source.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        let mut guard = shared.lock().unwrap();
                        let room = (limit as usize).saturating_sub(guard.0.len());
                        if n > room {
                            guard.1 = true;
                        }
                        let take = n.min(room);
                        guard.0.extend_from_slice(&chunk[..take]);
                    }
                }
            }
            shared.lock().unwrap().2 = true;
        });
        Capture { buffer }
    }

    /// Waits briefly for EOF; a descendant still holding the pipe open must
    /// not stall the worker.
    fn finish(self) -> (Vec<u8>, bool) {
        let deadline = Instant::now() + Duration::from_millis(500);
        loop {
            {
                let guard = self.buffer.lock().unwrap();
                if guard.2 || Instant::now() >= deadline {
                    return (guard.0.clone(), guard.1);
                }
            }
            thread::sleep(Duration::from_millis(2));
        }
    }
}

fn text(bytes: &[u8], truncated: bool, limit: u64) -> String {
    let mut s = String::from_utf8_lossy(bytes).into_owned();
    if truncated {
        s.push_str(&truncation_marker(limit));
    }
    s
}

fn normalize(output: &str) -> String {
    let lines: Vec<&str> = output.lines().map(str::trim_end).collect();
    let mut joined = lines.join("\n");
    while joined.ends_with('\n') {
        joined.pop();
    }
    joined.trim_end().to_owned()
}

fn memory_exhausted(outcome: &ExecOutcome, limits: &Limits) -> bool {
    let stderr = String::from_utf8_lossy(&outcome.stderr);
    let abnormal = !matches!(outcome.exit, Exit::Code(0));
    abnormal
        && (outcome.usage.max_rss_bytes >= limits.memory_bytes / 2
            || ["MemoryError", "bad_alloc", "Cannot allocate memory", "out of memory"]
                .iter()
                .any(|m| stderr.contains(m)))
}

fn classify(outcome: &ExecOutcome, limits: &Limits) -> JobStatus {
    if outcome.timed_out {
        return JobStatus::Timeout;
    }
    match outcome.exit {
        Exit::Code(0) => JobStatus::Ok,
        Exit::Signal(libc::SIGXCPU) => JobStatus::Timeout,
        Exit::Signal(libc::SIGKILL) if outcome.usage.cpu_time_ms + 100 >= limits.cpu_time_secs * 1000 => {
            JobStatus::Timeout
        }
        Exit::Signal(libc::SIGXFSZ) => JobStatus::ResourceExceeded,
        _ if memory_exhausted(outcome, limits) => JobStatus::ResourceExceeded,
        Exit::Signal(libc::SIGKILL) => JobStatus::ResourceExceeded,
        _ => JobStatus::RuntimeError,
    }
}

fn expand(template: &[String], sources: &[String]) -> Vec<String> {
    template
        .iter()
        .flat_map(|arg| {
            if arg == "{sources}" {
                sources.to_vec()
            } else {
                vec![arg.clone()]
            }
        })
        .collect()
}

impl SubprocessBackend {
    fn compile(
        &self,
        dir: &Path,
        uid: Option<u32>,
        job: &SandboxJob,
        profile: &ToolchainProfile,
    ) -> Result<(bool, ExecOutcome), std::io::Error> {
        let Some(compile) = &profile.compile else {
            return Ok((
                true,
                ExecOutcome {
                    exit: Exit::Code(0),
                    timed_out: false,
                    stdout: Vec::new(),
                    stderr: Vec::new(),
                    truncated: false,
                    usage: ResourceUsage::default(),
                },
            ));
        };
        let sources: Vec<String> = job
            .source_files
            .keys()
            .filter(|name| {
                profile
                    .source_suffix
                    .as_ref()
                    .is_none_or(|s| name.ends_with(s.as_str()))
            })
            .cloned()
            .collect();
        let argv = expand(compile, &sources);
        let outcome = self.run(&argv, dir, b"", &profile.compile_limits, uid)?;
        let ok = !outcome.timed_out && outcome.exit == Exit::Code(0);
        Ok((ok, outcome))
    }

    fn execute_inner(
        &self,
        dir: &Path,
        uid: Option<u32>,
        job: &SandboxJob,
        profile: &ToolchainProfile,
    ) -> std::io::Result<JobResult> {
        let run_limits = job.limits.unwrap_or(profile.limits);
        let (compiled, compile_outcome) = self.compile(dir, uid, job, profile)?;
        let compile_limit = profile.compile_limits.output_bytes;
        let mut compiler_bytes = compile_outcome.stdout.clone();
        compiler_bytes.extend_from_slice(&compile_outcome.stderr);
        let compiler_output = text(&compiler_bytes, compile_outcome.truncated, compile_limit);
        let mut usage = compile_outcome.usage;

        if !compiled {
            let status = if compile_outcome.timed_out {
                JobStatus::Timeout
            } else {
                JobStatus::CompileError
            };
            let test_outcomes = match &job.action {
                JobAction::UnitTests { suite } => Some(
                    suite
                        .tests
                        .iter()
                        .map(|t| TestOutcome {
                            test_id: t.id.clone(),
                            passed: false,
                            detail: "did not compile".into(),
                        })
                        .collect(),
                ),
                _ => None,
            };
            return Ok(JobResult {
                status,
                compiler_output,
                program_output: String::new(),
                test_outcomes,
                usage,
            });
        }

        match &job.action {
            JobAction::Compile => Ok(JobResult {
                status: JobStatus::Ok,
                compiler_output,
                program_output: String::new(),
                test_outcomes: None,
                usage,
            }),
            JobAction::CompileAndRun { stdin } => {
                let outcome = self.run(&profile.run, dir, stdin.as_bytes(), &run_limits, uid)?;
                let mut bytes = outcome.stdout.clone();
                bytes.extend_from_slice(&outcome.stderr);
                usage.wall_time_ms += outcome.usage.wall_time_ms;
                usage.cpu_time_ms += outcome.usage.cpu_time_ms;
                usage.max_rss_bytes = usage.max_rss_bytes.max(outcome.usage.max_rss_bytes);
                Ok(JobResult {
                    status: classify(&outcome, &run_limits),
                    compiler_output,
                    program_output: text(&bytes, outcome.truncated, run_limits.output_bytes),
                    test_outcomes: None,
                    usage,
                })
            }
            JobAction::UnitTests { suite } => {
                let mut outcomes = Vec::with_capacity(suite.tests.len());
                for test in &suite.tests {
                    let mut argv = profile.run.clone();
                    argv.extend(test.args.iter().cloned());
                    let outcome = self.run(&argv, dir, test.stdin.as_bytes(), &run_limits, uid)?;
                    usage.wall_time_ms += outcome.usage.wall_time_ms;
                    usage.cpu_time_ms += outcome.usage.cpu_time_ms;
                    usage.max_rss_bytes = usage.max_rss_bytes.max(outcome.usage.max_rss_bytes);
                    let status = classify(&outcome, &run_limits);
                    let got = normalize(&String::from_utf8_lossy(&outcome.stdout));
                    let want = normalize(&test.expected_stdout);
                    let (passed, detail) = match status {
                        JobStatus::Ok if got == want => (true, "output matches".to_owned()),
                        JobStatus::Ok => (false, format!("expected `{}`, got `{}`", clip(&want), clip(&got))),
                        JobStatus::Timeout => (false, "timed out".to_owned()),
                        JobStatus::ResourceExceeded => (false, "resource limit exceeded".to_owned()),
                        _ => (
                            false,
                            match outcome.exit {
                                Exit::Code(c) => format!("runtime error (exit code {c})"),
                                Exit::Signal(s) => format!("runtime error (signal {s})"),
                            },
                        ),
                    };
                    outcomes.push(TestOutcome {
                        test_id: test.id.clone(),
                        passed,
                        detail,
                    });
                }
                Ok(JobResult {
                    status: JobStatus::Ok,
                    compiler_output,
                    program_output: String::new(),
                    test_outcomes: Some(outcomes),
                    usage,
                })
            }
        }
    }
}

fn clip(s: &str) -> String {
    const MAX: usize = 120;
    if s.chars().count() <= MAX {
        s.to_owned()
    } else {
        format!("{}…", s.chars().take(MAX).collect::<String>())
    }
}

impl IsolationBackend for SubprocessBackend {
    fn execute(&self, slot: usize, job: &SandboxJob, profile: &ToolchainProfile) -> JobResult {
        let uid = self.slot_uid(slot);
        let dir = match self.prepare_dir(uid, &job.source_files) {
            Ok(dir) => dir,
            Err(e) => return JobResult::infra_error(format!("could not prepare scratch directory: {e}")),
        };
        let result = self
            .execute_inner(&dir, uid, job, profile)
            .unwrap_or_else(|e| JobResult::infra_error(format!("isolation backend failed: {e}")));
        self.cleanup(&dir, uid);
        result
    }
}
