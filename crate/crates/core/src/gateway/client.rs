//! Blocking HTTP client for a running gateway, used by the CLI. Do not call
//! it from inside an async runtime.

use serde_json::{json, Value};
use thiserror::Error;

use super::api::ApiError;
use super::instance::{InstanceDescriptor, InstanceMode};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach the gateway: {0}")]
    Transport(String),
    #[error("{0}")]
    Api(ApiError),
    #[error("unexpected response: {0}")]
    Decode(String),
}

#[derive(Debug, Clone)]
pub struct GatewayClient {
    base: String,
    http: reqwest::blocking::Client,
}

impl GatewayClient {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        GatewayClient {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::blocking::Client::new(),
        }
    }

    fn send(&self, request: reqwest::blocking::RequestBuilder, token: Option<&str>) -> Result<Value, ClientError> {
        let request = match token {
            Some(t) => request.bearer_auth(t),
            None => request,
        };
        let response = request.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if (200..300).contains(&status) {
            return serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()));
        }
        let mut error: ApiError =
            serde_json::from_str(&text).unwrap_or_else(|_| ApiError::new(status, "http_error", text.trim().to_owned()));
        error.status = status;
        Err(ClientError::Api(error))
    }

    /// Calls one API endpoint of the instance at `route`.
    pub fn call(&self, route: &str, endpoint: &str, token: Option<&str>, body: &Value) -> Result<Value, ClientError> {
        let url = format!("{}/x/{route}/api/{endpoint}", self.base);
        self.send(self.http.post(url).json(body), token)
    }

    pub fn staff_login(&self, route: &str, principal: &str, credential: &str) -> Result<String, ClientError> {
        let v = self.call(
            route,
            "staff_login",
            None,
            &json!({"principal": principal, "credential": credential}),
        )?;
        v["token"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| ClientError::Decode("login response without token".into()))
    }

    pub fn deploy(
        &self,
        deploy_token: &str,
        exam_dir: &str,
        source_ref: &str,
        mode: InstanceMode,
    ) -> Result<InstanceDescriptor, ClientError> {
        let body = json!({"exam_dir": exam_dir, "source_ref": source_ref, "mode": mode});
        let v = self.send(
            self.http.post(format!("{}/hook/deploy", self.base)).json(&body),
            Some(deploy_token),
        )?;
        serde_json::from_value(v).map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Descriptors and monitoring counts of every instance on the host.
    pub fn instances(&self, deploy_token: &str) -> Result<Value, ClientError> {
        self.send(
            self.http.get(format!("{}/hook/instances", self.base)),
            Some(deploy_token),
        )
    }
}
