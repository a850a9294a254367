//! Author-side preview with live reload.
//!
//! The previewer serves an exam directory (or a single exercise bundle) as a
//! preview instance and watches it. When the files change it loads them
//! again: a valid version replaces the running instance in place, keeping
//! the author's token, session and latest answers; an invalid one leaves
//! the old version serving and shows the diagnostics in every sync envelope.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::instance::{ExamSource, Instance, InstanceMode, PREVIEW_CREDENTIAL, PREVIEW_PARTICIPANT, PREVIEW_STATION};
use super::orchestrator::Orchestrator;
use super::GatewayError;
use crate::session::{LoginMode, SessionState};

/// Result of one reload attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reload {
    Unchanged,
    Reloaded {
        generation: u64,
    },
    /// The files on disk do not validate; the previous version keeps serving.
    Rejected(Vec<String>),
}

pub struct Previewer {
    orch: Arc<Orchestrator>,
    dir: PathBuf,
    route: String,
    fingerprint: Mutex<String>,
}

impl std::fmt::Debug for Previewer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Previewer")
            .field("dir", &self.dir)
            .field("route", &self.route)
            .finish()
    }
}

/// Content hash over every file below `dir`, in path order.
pub fn fingerprint(dir: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(current) = stack.pop() {
        for entry in std::fs::read_dir(&current)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        hasher.update(path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(std::fs::read(&path)?);
        hasher.update([0]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Previewer {
    /// Deploys `dir` as a preview instance. Fails with diagnostics if the
    /// very first version does not validate.
    pub fn start(orch: Arc<Orchestrator>, dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        let print = fingerprint(&dir)?;
        let source = ExamSource::load_for_preview(&dir).map_err(GatewayError::Validation)?;
        let descriptor = orch.deploy_source(source, "working-tree", InstanceMode::Preview, None)?;
        orch.refresh_routes();
        Ok(Previewer {
            orch,
            dir,
            route: descriptor.route,
            fingerprint: Mutex::new(print),
        })
    }

    pub fn route(&self) -> &str {
        &self.route
    }

    pub fn instance(&self) -> Option<Arc<Instance>> {
        self.orch.instance(&self.route)
    }

    /// Reloads if anything below the directory changed since the last look.
    pub fn poll(&self) -> Result<Reload, GatewayError> {
        let print = fingerprint(&self.dir)?;
        let mut last = self.fingerprint.lock().unwrap();
        if *last == print {
            return Ok(Reload::Unchanged);
        }
        *last = print;
        drop(last);
        self.reload()
    }

    pub fn reload(&self) -> Result<Reload, GatewayError> {
        let old = self
            .instance()
            .ok_or_else(|| GatewayError::NotFound(self.route.clone()))?;
        let source = match ExamSource::load_for_preview(&self.dir) {
            Ok(source) => source,
            Err(diagnostics) => {
                tracing::warn!(dir = %self.dir.display(), ?diagnostics, "preview reload rejected");
                *old.diagnostics.lock().unwrap() = diagnostics.clone();
                return Ok(Reload::Rejected(diagnostics));
            }
        };
        let before = old.session.snapshot();
        let was_started = before
            .sessions
            .get(PREVIEW_PARTICIPANT)
            .is_some_and(|s| matches!(s.state, SessionState::InProgress | SessionState::Submitted));
        let exercises: Vec<String> = source.config.exercise_refs.clone();

        self.orch
            .deploy_source(source, "working-tree", InstanceMode::Preview, Some(&self.route))?;
        let new = self
            .instance()
            .ok_or_else(|| GatewayError::NotFound(self.route.clone()))?;
        new.tokens.adopt(&old.tokens);
        if was_started {
            let session = &new.session;
            session.login(
                PREVIEW_PARTICIPANT,
                Some(PREVIEW_CREDENTIAL),
                LoginMode::Credential,
                None,
                PREVIEW_STATION,
            )?;
            session.accept_terms(PREVIEW_PARTICIPANT)?;
            for exercise in &exercises {
                if let Some(answer) = before.latest_answer(PREVIEW_PARTICIPANT, exercise) {
                    // An answer that no longer fits the edited exercise is
                    // simply dropped.
                    let _ = session.store_answer(PREVIEW_PARTICIPANT, exercise, &answer.body);
                }
            }
        }
        self.orch.refresh_routes();
        tracing::info!(route = %self.route, generation = new.generation, "preview reloaded");
        Ok(Reload::Reloaded {
            generation: new.generation,
        })
    }

    /// Polls the directory every `interval` on the current tokio runtime.
    pub fn watch(self: Arc<Self>, interval: Duration) -> tokio::task::JoinHandle<()> {
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(interval);
            loop {
                ticker.tick().await;
                let me = self.clone();
                match tokio::task::spawn_blocking(move || me.poll()).await {
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => tracing::warn!(error = %e, "preview poll failed"),
                    Err(e) => tracing::warn!(error = %e, "preview poll panicked"),
                }
            }
        })
    }
}
