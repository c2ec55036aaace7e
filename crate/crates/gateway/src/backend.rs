//! Completion backends and the record/replay store.
//!
//! Requests are keyed by the SHA-256 of the request body plus a sample index.
//! The index separates sibling doctor turns, which send identical prompts but
//! must come back as distinct branches.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{request_body, ChatClient, Transport};
use crate::config::RoleConfig;
use crate::prompt::ChatMessage;
use crate::{GatewayError, Result};

pub trait CompletionBackend: Sync {
    /// `sample` distinguishes repeated draws of the same request.
    fn complete(&self, config: &RoleConfig, messages: &[ChatMessage], sample: u32) -> Result<String>;
}

impl<T: Transport> CompletionBackend for ChatClient<T> {
    fn complete(&self, config: &RoleConfig, messages: &[ChatMessage], _sample: u32) -> Result<String> {
        ChatClient::complete(self, config, messages).map(|c| c.text)
    }
}

/// Backend driven by a closure, for scripted roles and tests.
pub struct FnBackend<F>(pub F);

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&RoleConfig, &[ChatMessage], u32) -> Result<String> + Sync,
{
    fn complete(&self, config: &RoleConfig, messages: &[ChatMessage], sample: u32) -> Result<String> {
        (self.0)(config, messages, sample)
    }
}

pub fn request_hash(config: &RoleConfig, messages: &[ChatMessage], sample: u32) -> String {
    let mut h = Sha256::new();
    h.update(request_body(config, messages).to_string().as_bytes());
    h.update(b"\n");
    h.update(config.template_version.as_bytes());
    h.update(b"\n");
    h.update(sample.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub request_hash: String,
    pub response: String,
}

/// Passes calls through to `inner` and appends each exchange to `sink` as a
/// JSON line.
pub struct RecordingBackend<B, W> {
    inner: B,
    sink: Mutex<W>,
}

impl<B: CompletionBackend, W: Write + Send> RecordingBackend<B, W> {
    pub fn new(inner: B, sink: W) -> Self {
        Self { inner, sink: Mutex::new(sink) }
    }

    pub fn into_sink(self) -> W {
        self.sink.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl<B: CompletionBackend, W: Write + Send> CompletionBackend for RecordingBackend<B, W> {
    fn complete(&self, config: &RoleConfig, messages: &[ChatMessage], sample: u32) -> Result<String> {
        let response = self.inner.complete(config, messages, sample)?;
        let entry = StoreEntry { request_hash: request_hash(config, messages, sample), response };
        let line = serde_json::to_string(&entry).expect("store entries always serialize");
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(sink, "{line}")?;
        sink.flush()?;
        Ok(entry.response)
    }
}

/// Answers from a recorded store; an unseen request is an error.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut responses = HashMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoreEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Store { line: i + 1, reason: e.to_string() })?;
            responses.insert(entry.request_hash, entry.response);
        }
        Ok(Self { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, config: &RoleConfig, messages: &[ChatMessage], sample: u32) -> Result<String> {
        let key = request_hash(config, messages, sample);
        self.responses.get(&key).cloned().ok_or(GatewayError::ReplayMiss(key))
    }
}
