//! `examkit` command line: local authoring tools, the gateway server, and
//! thin HTTP calls against a running gateway.

use std::io::BufRead;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use examkit::access::{CredentialHash, StaffDirectory};
use examkit::gateway::{
    ExamSource, GatewayClient, GatewayConfig, InstanceMode, Orchestrator, Previewer, DEPLOY_TOKEN_ENV,
    PREVIEW_CREDENTIAL, PREVIEW_PARTICIPANT, PREVIEW_STATION,
};
use examkit::sandbox::SandboxConfig;
use examkit::store::FileStore;

const SERVER_ENV: &str = "EXAMKIT_SERVER";
const PRINCIPAL_ENV: &str = "EXAMKIT_PRINCIPAL";
const CREDENTIAL_ENV: &str = "EXAMKIT_CREDENTIAL";
const SALT_ENV: &str = "EXAMKIT_CREDENTIAL_SALT";

#[derive(Parser)]
#[command(name = "examkit", version, about = "Self-hosted examination platform")]
struct Cli {
    /// Log debug output.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Remote {
    /// Gateway base URL.
    #[arg(long, env = SERVER_ENV, default_value = "http://127.0.0.1:8080")]
    server: String,
}

#[derive(clap::Args)]
struct Staff {
    #[command(flatten)]
    remote: Remote,
    /// Route of the exam instance.
    #[arg(long)]
    route: String,
    /// Staff principal; the credential is read from EXAMKIT_CREDENTIAL.
    #[arg(long, env = PRINCIPAL_ENV)]
    principal: String,
}

#[derive(Subcommand)]
enum Command {
    /// Check an exam directory or a single exercise bundle.
    Validate { dir: PathBuf },
    /// Serve an exam locally in preview mode and reload it on every change.
    Preview {
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long)]
        sandbox_config: Option<PathBuf>,
    },
    /// Run the gateway. Staff credentials come from EXAMKIT_STAFF_FILE, the
    /// deploy hook token from EXAMKIT_DEPLOY_TOKEN.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Exports and the mail outbox go here.
        #[arg(long, default_value = "examkit-data")]
        data_dir: PathBuf,
        /// Keep exam data in this directory instead of in memory.
        #[arg(long)]
        store_dir: Option<PathBuf>,
        #[arg(long)]
        sandbox_config: Option<PathBuf>,
        /// Only exam directories below this one may be deployed.
        #[arg(long)]
        exams_root: Option<PathBuf>,
    },
    /// Deploy an exam directory (as seen by the server) through the deploy hook.
    Deploy {
        dir: String,
        #[arg(long, default_value = "live")]
        mode: InstanceMode,
        /// Version identifier; defaults to `git describe` of the directory.
        #[arg(long)]
        source_ref: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Deploy an exam as a trial run.
    Trial {
        dir: String,
        #[arg(long)]
        source_ref: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Show counts for one instance (staff login) or all of them (deploy token).
    Monitor {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        route: Option<String>,
        #[arg(long, env = PRINCIPAL_ENV)]
        principal: Option<String>,
    },
    /// Evaluate all submissions of an instance.
    Evaluate {
        #[command(flatten)]
        staff: Staff,
        /// Evaluate even if some sessions are still open.
        #[arg(long)]
        force: bool,
    },
    /// Clear and release the results of an instance.
    Clear {
        #[command(flatten)]
        staff: Staff,
    },
    /// Send reports by email or make them available for download.
    Distribute {
        #[command(flatten)]
        staff: Staff,
        #[arg(long, default_value = "email")]
        mode: String,
    },
    /// Write the export archive of an instance on the server.
    Export {
        #[command(flatten)]
        staff: Staff,
    },
    /// Erase an instance. Needs a fresh export unless --force is given.
    Teardown {
        #[command(flatten)]
        staff: Staff,
        #[arg(long)]
        force: bool,
    },
    /// Hash a credential read from standard input for a roster or staff file.
    HashCredential {
        /// Salt; defaults to EXAMKIT_CREDENTIAL_SALT, then to a random one.
        #[arg(long, env = SALT_ENV)]
        salt: Option<String>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.verbose {
        tracing::Level::DEBUG
    } else {
        tracing::Level::INFO
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match cli.command {
        Command::Validate { dir } => validate(&dir),
        Command::Preview {
            dir,
            listen,
            sandbox_config,
        } => preview(dir, listen, sandbox_config),
        Command::Serve {
            listen,
            data_dir,
            store_dir,
            sandbox_config,
            exams_root,
        } => serve(listen, data_dir, store_dir, sandbox_config, exams_root),
        Command::Deploy {
            dir,
            mode,
            source_ref,
            remote,
        } => deploy(&remote, &dir, mode, source_ref),
        Command::Trial {
            dir,
            source_ref,
            remote,
        } => deploy(&remote, &dir, InstanceMode::Trial, source_ref),
        Command::Monitor {
            remote,
            route,
            principal,
        } => monitor(&remote, route, principal),
        Command::Evaluate { staff, force } => staff_call(&staff, "evaluate", json!({ "force": force })),
        Command::Clear { staff } => staff_call(&staff, "clear", json!({})),
        Command::Distribute { staff, mode } => staff_call(&staff, "distribute", json!({ "mode": mode })),
        Command::Export { staff } => staff_call(&staff, "export", json!({})),
        Command::Teardown { staff, force } => staff_call(&staff, "teardown", json!({ "require_export": !force })),
        Command::HashCredential { salt } => hash_credential(salt),
    }
}

fn print(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("values serialize"));
}

fn validate(dir: &Path) -> Result<()> {
    match ExamSource::load_for_preview(dir) {
        Ok(source) => {
            let c = &source.config;
            let max: examkit::Points = c
                .exercise_refs
                .iter()
                .filter_map(|id| source.pool.get(id))
                .map(|b| b.max_points)
                .sum();
            println!("{}: {} ({})", dir.display(), c.title, c.exam_id);
            println!(
                "  exercises: {} of {} in the pool, {max} points",
                c.exercise_refs.len(),
                source.pool.len()
            );
            println!(
                "  roster: {} participants, {} staff grants",
                c.roster.len(),
                c.role_grants.len()
            );
            println!("  duration: {} min", c.timing.duration_minutes);
            Ok(())
        }
        Err(diagnostics) => {
            for d in &diagnostics {
                eprintln!("error: {d}");
            }
            bail!("{} is not valid ({} problems)", dir.display(), diagnostics.len())
        }
    }
}

fn load_sandbox(path: Option<PathBuf>) -> Result<Option<SandboxConfig>> {
    path.map(|p| SandboxConfig::load(&p).with_context(|| format!("sandbox config {}", p.display())))
        .transpose()
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn preview(dir: PathBuf, listen: SocketAddr, sandbox: Option<PathBuf>) -> Result<()> {
    let data = tempfile::tempdir()?;
    let mut config = GatewayConfig::in_memory(data.path());
    config.sandbox = load_sandbox(sandbox)?;
    let orch = Arc::new(Orchestrator::new(config));
    let previewer = Arc::new(Previewer::start(orch.clone(), &dir).map_err(|e| anyhow::anyhow!("{e}"))?);
    println!(
        "preview of {} at http://{listen}/x/{}/",
        dir.display(),
        previewer.route()
    );
    println!("log in as `{PREVIEW_PARTICIPANT}` with credential `{PREVIEW_CREDENTIAL}` at station `{PREVIEW_STATION}`");
    runtime()?.block_on(async move {
        previewer.watch(Duration::from_millis(500));
        examkit::gateway::http::serve(orch, listen).await
    })?;
    Ok(())
}

fn serve(
    listen: SocketAddr,
    data_dir: PathBuf,
    store_dir: Option<PathBuf>,
    sandbox: Option<PathBuf>,
    exams_root: Option<PathBuf>,
) -> Result<()> {
    let mut config = GatewayConfig::in_memory(data_dir);
    if let Some(dir) = store_dir {
        config.store = Arc::new(FileStore::open(&dir).with_context(|| format!("store {}", dir.display()))?);
    }
    config.staff = StaffDirectory::from_env()
        .map_err(anyhow::Error::msg)
        .context("staff file")?;
    config.sandbox = load_sandbox(sandbox)?;
    config.exams_root = exams_root;
    config.deploy_token = std::env::var(DEPLOY_TOKEN_ENV).ok().filter(|t| !t.is_empty());
    if config.deploy_token.is_none() {
        tracing::warn!("{DEPLOY_TOKEN_ENV} is not set; the deploy hook is disabled");
    }
    let orch = Arc::new(Orchestrator::new(config));
    runtime()?.block_on(examkit::gateway::http::serve(orch, listen))?;
    Ok(())
}

fn env_secret(name: &str) -> Result<String> {
    std::env::var(name)
        .ok()
        .filter(|v| !v.is_empty())
        .with_context(|| format!("{name} is not set"))
}

/// `git describe` of the directory, or `unversioned` outside a repository.
fn source_ref_of(dir: &str) -> String {
    std::process::Command::new("git")
        .args(["-C", dir, "describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unversioned".into())
}

fn deploy(remote: &Remote, dir: &str, mode: InstanceMode, source_ref: Option<String>) -> Result<()> {
    let token = env_secret(DEPLOY_TOKEN_ENV)?;
    let source_ref = source_ref.unwrap_or_else(|| source_ref_of(dir));
    let descriptor = GatewayClient::new(&remote.server).deploy(&token, dir, &source_ref, mode)?;
    println!(
        "deployed {} ({}) at {}/x/{}/",
        descriptor.exam_id,
        descriptor.mode.as_str(),
        remote.server,
        descriptor.route
    );
    Ok(())
}

fn monitor(remote: &Remote, route: Option<String>, principal: Option<String>) -> Result<()> {
    let client = GatewayClient::new(&remote.server);
    match route {
        Some(route) => {
            let principal = principal.with_context(|| format!("--principal or {PRINCIPAL_ENV} is required"))?;
            let token = client.staff_login(&route, &principal, &env_secret(CREDENTIAL_ENV)?)?;
            print(&client.call(&route, "monitor", Some(&token), &json!({}))?);
        }
        None => print(&client.instances(&env_secret(DEPLOY_TOKEN_ENV)?)?),
    }
    Ok(())
}

fn staff_call(staff: &Staff, endpoint: &str, body: Value) -> Result<()> {
    let client = GatewayClient::new(&staff.remote.server);
    let token = client.staff_login(&staff.route, &staff.principal, &env_secret(CREDENTIAL_ENV)?)?;
    print(&client.call(&staff.route, endpoint, Some(&token), &body)?);
    Ok(())
}

fn hash_credential(salt: Option<String>) -> Result<()> {
    let salt = salt.unwrap_or_else(|| {
        use rand::RngCore;
        let mut bytes = [0u8; 8];
        rand::rng().fill_bytes(&mut bytes);
        hex::encode(bytes)
    });
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    let credential = line.trim_end_matches(['\r', '\n']);
    if credential.is_empty() {
        bail!("no credential on standard input");
    }
    println!("{}", CredentialHash::create(&salt, credential));
    Ok(())
}
