use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::instance::*;
use super::GatewayError;
use crate::access::{require, AccessLevel, Principal, StaffDirectory};
use crate::clock::{Clock, SystemClock};
use crate::config::is_safe_token;
use crate::grading::{FileOutbox, MailTransport};
use crate::sandbox::{SandboxConfig, SandboxService};
use crate::session::{ExportArchive, SessionError, SessionStore};
use crate::store::{DocumentStore, MemoryStore};

/// Host-level settings. Everything secret (staff credentials, the deploy
/// hook token) comes from the host environment, never from an exam
/// repository.
pub struct GatewayConfig {
    pub store: Arc<dyn DocumentStore>,
    pub clock: Arc<dyn Clock>,
    pub staff: StaffDirectory,
    /// Toolchains for programming exercises. Without it, compile tests are
    /// refused and sandboxed exercises evaluate as `needs_rerun`.
    pub sandbox: Option<SandboxConfig>,
    /// Where exports and the email outbox are written.
    pub data_dir: PathBuf,
    /// Transport for email distribution; defaults to a file outbox per
    /// instance under `data_dir/outbox`.
    pub mail: Option<Arc<dyn MailTransport>>,
    /// If set, the deploy hook only accepts exam directories below it.
    pub exams_root: Option<PathBuf>,
    /// Bearer token the deploy hook requires; the hook is disabled without it.
    pub deploy_token: Option<String>,
    pub refresh_interval: Duration,
    pub sync_interval: Duration,
    pub sweep_interval: Duration,
}

impl std::fmt::Debug for GatewayConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatewayConfig")
            .field("data_dir", &self.data_dir)
            .finish_non_exhaustive()
    }
}

/// Environment variable holding the deploy hook token.
pub const DEPLOY_TOKEN_ENV: &str = "EXAMKIT_DEPLOY_TOKEN";

impl GatewayConfig {
    /// In-memory storage, system clock, no sandbox, no staff.
    pub fn in_memory(data_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            store: Arc::new(MemoryStore::new()),
            clock: Arc::new(SystemClock),
            staff: StaffDirectory::new(),
            sandbox: None,
            data_dir: data_dir.into(),
            mail: None,
            exams_root: None,
            deploy_token: None,
            refresh_interval: Duration::from_secs(1),
            sync_interval: Duration::from_secs(2),
            sweep_interval: Duration::from_secs(2),
        }
    }
}

/// Route → instance map the HTTP layer resolves requests with. Rebuilt from
/// the set of ready instances by [`Orchestrator::refresh_routes`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteTable {
    pub routes: BTreeMap<String, String>,
    pub refreshed_at: Option<DateTime<Utc>>,
    pub refresh_interval_ms: u64,
}

/// Deploys, tracks and tears down exam instances.
pub struct Orchestrator {
    config: GatewayConfig,
    instances: RwLock<BTreeMap<String, Arc<Instance>>>,
    table: RwLock<RouteTable>,
    counter: AtomicU64,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("routes", &self.route_table())
            .finish()
    }
}

impl Orchestrator {
    pub fn new(config: GatewayConfig) -> Self {
        let table = RouteTable {
            refresh_interval_ms: config.refresh_interval.as_millis() as u64,
            ..RouteTable::default()
        };
        Orchestrator {
            config,
            instances: RwLock::new(BTreeMap::new()),
            table: RwLock::new(table),
            counter: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn staff(&self) -> &StaffDirectory {
        &self.config.staff
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.config.clock.now()
    }

    /// Resolves an exam directory given to the deploy hook.
    pub fn resolve_exam_dir(&self, requested: &str) -> Result<PathBuf, GatewayError> {
        let Some(root) = &self.config.exams_root else {
            return Ok(PathBuf::from(requested));
        };
        let root = root
            .canonicalize()
            .map_err(|e| GatewayError::Validation(vec![format!("exams root: {e}")]))?;
        let path = root
            .join(requested)
            .canonicalize()
            .map_err(|e| GatewayError::Validation(vec![format!("{requested}: {e}")]))?;
        if !path.starts_with(&root) {
            return Err(GatewayError::Validation(vec![format!(
                "{requested} is outside the exams root"
            )]));
        }
        Ok(path)
    }

    /// Validates an exam directory and starts an isolated instance for it.
    /// The instance becomes reachable after the next route refresh.
    pub fn deploy(
        &self,
        exam_dir: &Path,
        source_ref: &str,
        mode: InstanceMode,
    ) -> Result<InstanceDescriptor, GatewayError> {
        let source = match mode {
            InstanceMode::Preview => ExamSource::load_for_preview(exam_dir),
            _ => ExamSource::load(exam_dir),
        }
        .map_err(GatewayError::Validation)?;
        self.deploy_source(source, source_ref, mode, None)
    }

    pub(crate) fn deploy_source(
        &self,
        source: ExamSource,
        source_ref: &str,
        mode: InstanceMode,
        fixed_route: Option<&str>,
    ) -> Result<InstanceDescriptor, GatewayError> {
        if mode == InstanceMode::Live && source.config.roster.is_empty() {
            return Err(GatewayError::Validation(vec![
                "a live exam needs a non-empty roster".into()
            ]));
        }
        let config = match mode {
            InstanceMode::Preview => preview_config(&source.config),
            _ => source.config.clone(),
        };
        let route = match fixed_route {
            Some(route) => route.to_owned(),
            None => self.fresh_route(&config.exam_id, mode),
        };
        if !is_safe_token(&route) {
            return Err(GatewayError::Validation(vec![format!(
                "route `{route}` is not a safe token"
            )]));
        }
        let descriptor = InstanceDescriptor {
            exam_id: config.exam_id.clone(),
            source_ref: source_ref.to_owned(),
            mode,
            route: route.clone(),
            status: InstanceStatus::Starting,
            created_at: self.now(),
        };
        let generation = self.counter.fetch_add(1, Ordering::Relaxed);
        // A replacement must not share storage with the instance it replaces,
        // which is erased only after the new one is up.
        let namespace = match fixed_route {
            Some(_) => format!("{route}-r{generation}"),
            None => route.clone(),
        };
        let session = SessionStore::open(
            Arc::new(config),
            &source.pool,
            self.config.store.clone(),
            &namespace,
            self.config.clock.clone(),
        )?;
        let sandbox = match &self.config.sandbox {
            Some(cfg) => Some(Arc::new(
                SandboxService::start(cfg.clone()).map_err(|e| GatewayError::Internal(e.to_string()))?,
            )),
            None => None,
        };
        let instance = Arc::new(Instance::new(
            descriptor,
            source,
            Arc::new(session),
            sandbox,
            generation,
        ));
        if mode == InstanceMode::Preview {
            instance
                .session
                .authorize_station(PREVIEW_STATION, &Principal::new("previewer", AccessLevel::Supervisor))?;
        }
        instance.set_status(InstanceStatus::Ready);

        let previous = {
            let mut instances = self.instances.write().unwrap();
            let previous = instances
                .get(&route)
                .filter(|i| i.descriptor().status != InstanceStatus::TornDown)
                .cloned();
            if previous.is_some() && fixed_route.is_none() {
                return Err(GatewayError::RouteTaken(route));
            }
            instances.insert(route.clone(), instance.clone());
            previous
        };
        if let Some(old) = previous {
            // Only the previewer replaces an instance in place.
            // Its tokens stay readable so the replacement can adopt them.
            old.set_status(InstanceStatus::TornDown);
            let _ = old.session.erase_all(false);
        }
        tracing::info!(%route, exam = %instance.session.config().exam_id, mode = mode.as_str(), source_ref, "instance deployed");
        Ok(instance.descriptor())
    }

    fn fresh_route(&self, exam_id: &str, mode: InstanceMode) -> String {
        let instances = self.instances.read().unwrap();
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed);
            let route = format!("{exam_id}-{}-{n}", mode.as_str());
            let taken = instances.contains_key(&route)
                || self
                    .config
                    .store
                    .namespaces()
                    .map(|ns| ns.contains(&route))
                    .unwrap_or(false);
            if !taken {
                return route;
            }
        }
    }

    /// Rebuilds the route table from the ready instances.
    pub fn refresh_routes(&self) -> RouteTable {
        let routes = self
            .instances
            .read()
            .unwrap()
            .iter()
            .filter(|(_, i)| i.is_ready())
            .map(|(route, i)| (route.clone(), i.session.namespace().to_owned()))
            .collect();
        let mut table = self.table.write().unwrap();
        table.routes = routes;
        table.refreshed_at = Some(self.now());
        table.clone()
    }

    pub fn route_table(&self) -> RouteTable {
        self.table.read().unwrap().clone()
    }

    /// The ready instance behind `route`, as the route table currently sees it.
    pub fn resolve(&self, route: &str) -> Option<Arc<Instance>> {
        if !self.table.read().unwrap().routes.contains_key(route) {
            return None;
        }
        self.instances
            .read()
            .unwrap()
            .get(route)
            .filter(|i| i.is_ready())
            .cloned()
    }

    /// Any instance known under `route`, whatever its status.
    pub fn instance(&self, route: &str) -> Option<Arc<Instance>> {
        self.instances.read().unwrap().get(route).cloned()
    }

    pub fn descriptors(&self) -> Vec<InstanceDescriptor> {
        self.instances
            .read()
            .unwrap()
            .values()
            .map(|i| i.descriptor())
            .collect()
    }

    fn ready_instance(&self, route: &str) -> Result<Arc<Instance>, GatewayError> {
        self.instance(route)
            .filter(|i| i.is_ready())
            .ok_or_else(|| GatewayError::NotFound(route.to_owned()))
    }

    /// Erases the instance's data and removes its route. Live and trial
    /// instances need a fresh export unless `require_export` is false;
    /// preview instances never hold personal data and need none.
    pub fn teardown(
        &self,
        route: &str,
        require_export: bool,
        by: &Principal,
    ) -> Result<InstanceDescriptor, GatewayError> {
        require(by, AccessLevel::Admin)?;
        let instance = self.ready_instance(route)?;
        let needs_export = require_export && instance.mode() != InstanceMode::Preview;
        if needs_export && !instance.session.export_is_fresh() {
            return Err(SessionError::ExportRequired("no export covers the latest events".into()).into());
        }
        instance.set_status(InstanceStatus::Draining);
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        while instance.in_flight() > 0 && std::time::Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
        if let Err(e) = instance.session.erase_all(needs_export) {
            instance.set_status(InstanceStatus::Ready);
            return Err(e.into());
        }
        instance.tokens.revoke_all();
        instance.set_status(InstanceStatus::TornDown);
        tracing::info!(%route, by = %by.id, "instance torn down");
        Ok(instance.descriptor())
    }

    /// Writes the export archive of an instance below `data_dir/exports`.
    pub fn export(&self, route: &str, by: &Principal) -> Result<ExportArchive, GatewayError> {
        require(by, AccessLevel::Admin)?;
        let instance = self.ready_instance(route)?;
        let descriptor = instance.descriptor();
        let dir = self
            .config
            .data_dir
            .join("exports")
            .join(route)
            .join(format!("{:06}", instance.session.last_seq()));
        let extras = instance
            .grader
            .export_extras(descriptor.mode.as_str(), &descriptor.source_ref);
        Ok(instance.session.export_all(&dir, &extras)?)
    }

    pub fn monitor(&self, route: &str, by: &Principal) -> Result<MonitorReport, GatewayError> {
        require(by, AccessLevel::Supervisor)?;
        Ok(self.ready_instance(route)?.monitor())
    }

    /// Counts across every ready instance; admin only.
    pub fn monitor_all(&self, by: &Principal) -> Result<Vec<MonitorReport>, GatewayError> {
        require(by, AccessLevel::Admin)?;
        Ok(self
            .instances
            .read()
            .unwrap()
            .values()
            .filter(|i| i.is_ready())
            .map(|i| i.monitor())
            .collect())
    }

    /// Mail transport for an instance's email distribution.
    pub fn mail_for(&self, route: &str) -> Result<Arc<dyn MailTransport>, GatewayError> {
        match &self.config.mail {
            Some(mail) => Ok(mail.clone()),
            None => Ok(Arc::new(FileOutbox::new(
                self.config.data_dir.join("outbox").join(route),
            )?)),
        }
    }

    /// Submits overdue sessions of every ready instance. Returns how many
    /// sessions were submitted.
    pub fn sweep_all(&self) -> usize {
        let instances: Vec<Arc<Instance>> = self
            .instances
            .read()
            .unwrap()
            .values()
            .filter(|i| i.is_ready())
            .cloned()
            .collect();
        instances
            .iter()
            .map(|i| match i.session.sweep() {
                Ok(done) => done.len(),
                Err(e) => {
                    tracing::warn!(route = %i.route(), error = %e, "sweep failed");
                    0
                }
            })
            .sum()
    }
}
