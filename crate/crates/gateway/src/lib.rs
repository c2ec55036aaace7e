//! Chat-completions backends for the four interview roles.
//!
//! A doctor model asks questions, a patient model answers from the case
//! facts, a diagnostician names a diagnosis from the finished transcript and
//! a grader scores that diagnosis against the gold answer. This crate renders
//! the role prompts, talks to any endpoint that speaks the common
//! chat-completions JSON shape, records and replays those exchanges, and
//! assembles graded conversation forests that `scf-core` can turn into
//! training exports.

pub mod backend;
pub mod client;
pub mod config;
pub mod generate;
pub mod grade;
pub mod prompt;

use thiserror::Error;

pub use backend::{CompletionBackend, FnBackend, RecordingBackend, ReplayBackend};
pub use client::{ChatClient, HttpTransport, RetryPolicy, Transport};
pub use config::{GatewayConfig, RoleConfig, RoleKind};
pub use generate::{generate_forest, GeneratedForest, RoleBackends};
pub use grade::{grade_via_backend, parse_grade};
pub use prompt::{render_role_prompt, ChatMessage, Speaker, Turn};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("{role} template: {reason}")]
    Template { role: RoleKind, reason: String },
    #[error("malformed transcript: {0}")]
    Transcript(String),
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("transport failure after {retries} retries: {reason}")]
    Transport { retries: u32, reason: String },
    #[error("endpoint returned status {status} after {retries} retries: {body}")]
    Status { status: u16, body: String, retries: u32 },
    #[error("unexpected response body: {0}")]
    Protocol(String),
    #[error("grader reply has no unique score after a stricter reprompt: {0:?}")]
    UnparseableGrade(String),
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("replay store line {line}: {reason}")]
    Store { line: usize, reason: String },
    #[error(transparent)]
    Forest(#[from] scf_core::forest::ForestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;
