//! A gateway on an ephemeral port, driven over real HTTP, with a manual clock.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tempfile::TempDir;

use examkit::demo;
use examkit::gateway::{http, ApiError, ClientError, GatewayClient, GatewayConfig, InstanceMode, Orchestrator};
use examkit::store::{DocumentStore, FileStore};
use examkit::ManualClock;

pub const DEPLOY_TOKEN: &str = "test-deploy-token";

pub struct Server {
    pub orch: Arc<Orchestrator>,
    pub clock: Arc<ManualClock>,
    pub store: Arc<FileStore>,
    pub client: GatewayClient,
    pub base: String,
    pub store_dir: TempDir,
    pub data_dir: TempDir,
    _runtime: tokio::runtime::Runtime,
}

impl Server {
    pub fn start(with_sandbox: bool) -> Server {
        let store_dir = TempDir::new().unwrap();
        let data_dir = TempDir::new().unwrap();
        let clock = Arc::new(ManualClock::new(demo::at(9, 0)));
        let store = Arc::new(FileStore::open(store_dir.path()).unwrap());
        let mut config = GatewayConfig::in_memory(data_dir.path());
        config.store = store.clone();
        config.clock = clock.clone();
        config.staff = demo::staff();
        config.sandbox = with_sandbox.then(demo::sandbox_config);
        config.exams_root = Some(demo::fixtures_dir());
        config.deploy_token = Some(DEPLOY_TOKEN.into());
        config.refresh_interval = Duration::from_millis(100);
        config.sweep_interval = Duration::from_millis(100);
        config.sync_interval = Duration::from_millis(200);
        let orch = Arc::new(Orchestrator::new(config));

        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let served = orch.clone();
        runtime.spawn(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            http::serve_on(served, listener).await.unwrap();
        });
        Server {
            orch,
            clock,
            store,
            client: GatewayClient::new(&base),
            base,
            store_dir,
            data_dir,
            _runtime: runtime,
        }
    }

    pub fn deploy(&self, mode: InstanceMode) -> String {
        self.client
            .deploy(DEPLOY_TOKEN, "demo-exam", "demo-v1", mode)
            .unwrap()
            .route
    }

    pub fn call(&self, route: &str, endpoint: &str, token: Option<&str>, body: Value) -> Result<Value, ApiError> {
        self.client.call(route, endpoint, token, &body).map_err(|e| match e {
            ClientError::Api(api) => api,
            other => panic!("{endpoint}: {other}"),
        })
    }

    pub fn ok(&self, route: &str, endpoint: &str, token: &str, body: Value) -> Value {
        self.call(route, endpoint, Some(token), body)
            .unwrap_or_else(|e| panic!("{endpoint}: {e}"))
    }

    /// Raw POST returning the status code and body text.
    pub fn raw(&self, route: &str, endpoint: &str, token: Option<&str>, body: &'static str) -> (u16, String) {
        let http = reqwest::blocking::Client::new();
        let mut request = http.post(format!("{}/x/{route}/api/{endpoint}", self.base)).body(body);
        if let Some(t) = token {
            request = request.bearer_auth(t);
        }
        let response = request.send().unwrap();
        (response.status().as_u16(), response.text().unwrap())
    }

    pub fn staff(&self, route: &str, who: &str) -> String {
        self.client
            .staff_login(route, who, &demo::staff_credential(who))
            .unwrap()
    }

    pub fn login(&self, route: &str, participant: &str, station: &str) -> String {
        let v = self
            .call(
                route,
                "login",
                None,
                json!({"participant_id": participant, "credential": demo::credential(participant), "station_id": station}),
            )
            .unwrap_or_else(|e| panic!("login {participant}: {e}"));
        v["token"].as_str().unwrap().to_owned()
    }

    /// Authorizes a station for `participant`, logs in and accepts the terms.
    pub fn sit(&self, route: &str, supervisor: &str, participant: &str) -> String {
        let station = format!("station-{participant}");
        self.ok(route, "authorize_station", supervisor, json!({"station_id": station}));
        let token = self.login(route, participant, &station);
        self.ok(route, "accept_terms", &token, json!({}));
        token
    }

    /// Everything the storage backend holds, as text.
    pub fn storage_dump(&self) -> String {
        let mut text = self.store.raw_contents().unwrap();
        for entry in walk(self.store_dir.path()) {
            text.push_str(&String::from_utf8_lossy(&std::fs::read(entry).unwrap()));
        }
        text
    }
}

pub fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Waits until `check` holds, polling every 20 ms, for at most `limit`.
pub fn eventually(limit: Duration, mut check: impl FnMut() -> bool) -> bool {
    let start = std::time::Instant::now();
    while start.elapsed() < limit {
        if check() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    check()
}
