//! Runs the gateway on a local port, deploys the demo exam through the
//! deploy hook and drives one participant over HTTP with the client.

use std::sync::Arc;

use anyhow::Result;
use examkit::demo;
use examkit::gateway::{http, GatewayClient, GatewayConfig, InstanceMode, Orchestrator};
use serde_json::json;

fn main() -> Result<()> {
    let data = tempfile::tempdir()?;
    let mut config = GatewayConfig::in_memory(data.path());
    config.staff = demo::staff();
    config.exams_root = Some(demo::fixtures_dir());
    config.deploy_token = Some("example-token".into());
    let orch = Arc::new(Orchestrator::new(config));

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    runtime.spawn(http::serve_on(orch, listener));
    println!("gateway at {base}");

    let client = GatewayClient::new(&base);
    let route = client
        .deploy("example-token", "demo-exam", "example", InstanceMode::Trial)?
        .route;
    println!("deployed at {base}/x/{route}/");

    let sup = client.staff_login(&route, "sup1", &demo::staff_credential("sup1"))?;
    client.call(
        &route,
        "authorize_station",
        Some(&sup),
        &json!({"station_id": "desk-1"}),
    )?;
    let login = client.call(
        &route,
        "login",
        None,
        &json!({"participant_id": "p01", "credential": demo::credential("p01"), "station_id": "desk-1"}),
    )?;
    let token = login["token"].as_str().unwrap_or_default().to_owned();
    client.call(&route, "accept_terms", Some(&token), &json!({}))?;
    let sync = client.call(&route, "sync", Some(&token), &json!({}))?;
    println!(
        "p01: {} exercises, {}s left",
        sync["exercise_delta"].as_array().map_or(0, Vec::len),
        sync["remaining_seconds"]
    );

    match client.call(&route, "evaluate", Some(&sup), &json!({})) {
        Err(e) => println!("supervisor calling evaluate: {e}"),
        Ok(_) => println!("supervisor calling evaluate succeeded?"),
    }
    let monitor = client.call(&route, "monitor", Some(&sup), &json!({}))?;
    println!("monitor: {}", monitor["per_state"]);
    Ok(())
}
