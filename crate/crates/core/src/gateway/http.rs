//! HTTP surface of the gateway.
//!
//! ```text
//! GET  /healthz
//! GET  /routes                       current route table
//! GET  /x/{route}/info               public exam info (title, terms, mode)
//! POST /x/{route}/api/{endpoint}     see [`super::api`]
//! GET  /x/{route}/ws?token=...       sync envelopes over a websocket
//! POST /hook/deploy                  {exam_dir, source_ref, mode}; deploy token
//! GET  /hook/instances               descriptors and global counts; deploy token
//! ```
//!
//! The websocket pushes a [`SyncEnvelope`](super::SyncEnvelope) every sync
//! interval and whenever the client sends a `SyncRequest`. Clients without
//! websockets poll the `sync` endpoint instead.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::api::{dispatch, ApiError, Endpoint, SyncRequest};
use super::instance::InstanceMode;
use super::orchestrator::Orchestrator;
use crate::access::{AccessLevel, Principal};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type Shared = Arc<Orchestrator>;

pub fn router(orch: Shared) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/routes", get(routes))
        .route("/x/{route}/info", get(info))
        .route("/x/{route}/api/{endpoint}", post(api))
        .route("/x/{route}/ws", get(ws))
        .route("/hook/deploy", post(deploy_hook))
        .route("/hook/instances", get(instances))
        .with_state(orch)
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

async fn routes(State(orch): State<Shared>) -> Json<Value> {
    Json(json!(orch.route_table()))
}

async fn info(State(orch): State<Shared>, Path(route): Path<String>) -> Result<Json<Value>, ApiError> {
    let instance = orch
        .resolve(&route)
        .ok_or_else(|| ApiError::not_found(format!("no exam at `{route}`")))?;
    let config = instance.session.config();
    Ok(Json(json!({
        "exam_id": config.exam_id,
        "title": config.title,
        "mode": instance.mode(),
        "terms_text": config.terms_text,
        "generation": instance.generation,
        "sync_interval_ms": orch.config().sync_interval.as_millis() as u64,
    })))
}

async fn api(
    State(orch): State<Shared>,
    Path((route, endpoint)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let endpoint =
        Endpoint::from_name(&endpoint).ok_or_else(|| ApiError::not_found(format!("no endpoint `{endpoint}`")))?;
    let instance = orch
        .resolve(&route)
        .ok_or_else(|| ApiError::not_found(format!("no exam at `{route}`")))?;
    let token = bearer(&headers).map(str::to_owned);
    let value = tokio::task::spawn_blocking(move || dispatch(&orch, &instance, endpoint, token.as_deref(), &body))
        .await
        .map_err(|e| ApiError::new(500, "internal", e.to_string()))??;
    Ok(Json(value))
}

#[derive(Deserialize)]
struct WsQuery {
    token: String,
}

async fn ws(
    State(orch): State<Shared>,
    Path(route): Path<String>,
    Query(query): Query<WsQuery>,
    upgrade: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let instance = orch
        .resolve(&route)
        .ok_or_else(|| ApiError::not_found(format!("no exam at `{route}`")))?;
    super::api::authorize(&instance, Endpoint::Sync, Some(&query.token))?;
    Ok(upgrade.on_upgrade(move |socket| sync_loop(orch, route, query.token, socket)))
}

async fn envelope(orch: &Shared, route: &str, token: &str, request: SyncRequest) -> Result<Value, ApiError> {
    let instance = orch
        .resolve(route)
        .ok_or_else(|| ApiError::not_found(format!("no exam at `{route}`")))?;
    let (orch, token) = (orch.clone(), token.to_owned());
    let body = serde_json::to_vec(&request).expect("sync requests serialize");
    tokio::task::spawn_blocking(move || dispatch(&orch, &instance, Endpoint::Sync, Some(&token), &body))
        .await
        .map_err(|e| ApiError::new(500, "internal", e.to_string()))?
}

async fn sync_loop(orch: Shared, route: String, token: String, mut socket: WebSocket) {
    let mut ticker = tokio::time::interval(orch.config().sync_interval);
    let mut request = SyncRequest::default();
    loop {
        tokio::select! {
            _ = ticker.tick() => {}
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<SyncRequest>(&text) {
                    Ok(r) => request = r,
                    Err(e) => {
                        let err = ApiError::bad_request(e.to_string());
                        if socket.send(Message::text(json!({ "error": err }).to_string())).await.is_err() {
                            return;
                        }
                        continue;
                    }
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => continue,
            },
        }
        let message = match envelope(&orch, &route, &token, request).await {
            Ok(value) => {
                // The client is assumed to apply what it was sent.
                request.client_version = value["version"].as_u64().unwrap_or(0);
                request.generation = value["generation"].as_u64().unwrap_or(0);
                value
            }
            Err(err) => {
                let fatal = matches!(err.status, 401 | 404);
                let sent = socket.send(Message::text(json!({ "error": err }).to_string())).await;
                if fatal || sent.is_err() {
                    return;
                }
                continue;
            }
        };
        if socket.send(Message::text(message.to_string())).await.is_err() {
            return;
        }
    }
}

fn check_deploy_token(orch: &Orchestrator, headers: &HeaderMap) -> Result<Principal, ApiError> {
    let Some(expected) = orch.config().deploy_token.as_deref() else {
        return Err(ApiError::new(
            403,
            "forbidden",
            "the deploy hook is disabled on this host",
        ));
    };
    match bearer(headers) {
        Some(given) if given == expected => Ok(Principal::new("deploy-hook", AccessLevel::Admin)),
        Some(_) => Err(ApiError::new(403, "forbidden", "wrong deploy token")),
        None => Err(ApiError::unauthenticated()),
    }
}

#[derive(Deserialize)]
struct DeployRequest {
    exam_dir: String,
    source_ref: String,
    mode: InstanceMode,
}

async fn deploy_hook(State(orch): State<Shared>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    check_deploy_token(&orch, &headers)?;
    let request: DeployRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))?;
    let descriptor = tokio::task::spawn_blocking(move || {
        let dir = orch.resolve_exam_dir(&request.exam_dir)?;
        let descriptor = orch.deploy(&dir, &request.source_ref, request.mode)?;
        orch.refresh_routes();
        Ok::<_, super::GatewayError>(descriptor)
    })
    .await
    .map_err(|e| ApiError::new(500, "internal", e.to_string()))??;
    Ok(Json(json!(descriptor)))
}

async fn instances(State(orch): State<Shared>, headers: HeaderMap) -> Result<Json<Value>, ApiError> {
    let operator = check_deploy_token(&orch, &headers)?;
    let reports = orch.monitor_all(&operator)?;
    Ok(Json(json!({ "instances": orch.descriptors(), "monitor": reports })))
}

/// Runs route refresh and deadline sweeps until the runtime shuts down.
pub fn spawn_background(orch: Shared) {
    let refresher = orch.clone();
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(refresher.config().refresh_interval);
        loop {
            ticker.tick().await;
            refresher.refresh_routes();
        }
    });
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(orch.config().sweep_interval);
        loop {
            ticker.tick().await;
            let o = orch.clone();
            match tokio::task::spawn_blocking(move || o.sweep_all()).await {
                Ok(0) => {}
                Ok(n) => tracing::info!(submitted = n, "deadline sweep"),
                Err(e) => tracing::warn!(error = %e, "deadline sweep panicked"),
            }
        }
    });
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(orch: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(orch, listener).await
}

/// Serves on an already bound listener, with route refresh and deadline
/// sweeps running in the background.
pub async fn serve_on(orch: Shared, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    orch.refresh_routes();
    spawn_background(orch.clone());
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(orch)).await
}
