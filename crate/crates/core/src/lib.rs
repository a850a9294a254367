//! # examkit
//!
//! A self-hosted examination platform covering the whole life of an exam:
//!
//! 1. **Design and configuration**: a single human-readable [`config`] file
//!    selects exercises from a pool of self-contained [`exercise`] bundles and
//!    defines timing, roster, roles and the grade chart.
//! 2. **Examination**: the [`session`] store runs the per-participant state
//!    machine over an append-only event log, persisting schemaless answers in a
//!    pluggable [`store`] backend. Programming exercises are compiled and tested
//!    in the [`sandbox`] service.
//! 3. **Evaluation and reporting**: [`grading`] evaluates every submission
//!    deterministically, merges manual scores and bonus points, assembles
//!    overview-first reports and gates their release on examiner clearance.
//!
//! The [`gateway`] module deploys isolated exam instances behind a dynamic
//! route table and exposes the HTTP API used by the participant client and the
//! admin panel. Exam data leaves the system through an export archive before
//! the instance is erased.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod access;
pub mod clock;
pub mod config;
pub mod demo;
pub mod exercise;
pub mod gateway;
pub mod grading;
pub mod points;
pub mod sandbox;
pub mod session;
pub mod store;

pub use access::{AccessLevel, Principal};
pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{ExamConfig, GradeChart, TimingPolicy};
pub use exercise::{ExerciseBundle, ExercisePool, VariantInstance, VariantSeed};
pub use points::Points;
