//! The externally reachable side: exam instances, the route table, the HTTP
//! and websocket API, the deploy hook and the live-reloading previewer.
//!
//! Each deployed exam is an [`Instance`] with its own storage namespace,
//! sandbox queue and token registry. The [`Orchestrator`] owns all instances
//! and periodically rebuilds the [`RouteTable`] from the ready ones. Requests
//! go through [`api::dispatch`], which checks the declared access matrix
//! before any request body is looked at.

pub mod api;
pub mod client;
pub mod http;
mod instance;
mod orchestrator;
pub mod preview;

use thiserror::Error;

use crate::access::AccessDenied;
use crate::grading::GradingError;
use crate::sandbox::SandboxError;
use crate::session::SessionError;

pub use api::{call, ApiError, Endpoint, ExerciseSummary, Requirement, SyncEnvelope, SyncRequest};
pub use client::{ClientError, GatewayClient};
pub use instance::{
    preview_config, ExamSource, Instance, InstanceDescriptor, InstanceMode, InstanceStatus, MonitorReport,
    TokenRegistry, EXERCISES_DIR, PREVIEW_CREDENTIAL, PREVIEW_PARTICIPANT, PREVIEW_STATION,
};
pub use orchestrator::{GatewayConfig, Orchestrator, RouteTable, DEPLOY_TOKEN_ENV};
pub use preview::Previewer;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("route `{0}` is already in use")]
    RouteTaken(String),
    #[error("no ready instance at route `{0}`")]
    NotFound(String),
    #[error(transparent)]
    Access(#[from] AccessDenied),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Grading(#[from] GradingError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal: {0}")]
    Internal(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Validation(_) => "validation_failed",
            GatewayError::RouteTaken(_) => "route_taken",
            GatewayError::NotFound(_) => "not_found",
            GatewayError::Access(_) => "forbidden",
            GatewayError::Session(e) => e.code(),
            GatewayError::Grading(e) => e.code(),
            GatewayError::Sandbox(SandboxError::QueueFull(_)) => "sandbox_busy",
            GatewayError::Sandbox(_) => "sandbox_error",
            GatewayError::Io(_) | GatewayError::Internal(_) => "internal",
        }
    }
}

#[cfg(test)]
mod tests;
