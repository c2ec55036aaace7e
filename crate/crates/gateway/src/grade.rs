//! Grader reply parsing.

use std::sync::OnceLock;

use regex::Regex;

use crate::backend::CompletionBackend;
use crate::config::RoleConfig;
use crate::prompt::{grader_messages, ChatMessage};
use crate::{GatewayError, Result};

const STRICT_REPROMPT: &str =
    "Your reply could not be read as a score. Answer with exactly one of 1.0, 0.5 or 0.0 and no other text.";

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^\d.])(1\.0|0\.5|0\.0)(?:$|[^\d])").expect("valid pattern"))
}

/// The single scale value named in `reply`, if exactly one distinct value
/// appears. "Score: 0.5 (related)" parses; "1.0 or 0.5" does not.
pub fn parse_grade(reply: &str) -> Option<f64> {
    let mut found: Option<&str> = None;
    for cap in score_re().captures_iter(reply) {
        let token = cap.get(1).map(|m| m.as_str())?;
        match found {
            Some(prev) if prev != token => return None,
            _ => found = Some(token),
        }
    }
    found.and_then(|t| t.parse().ok())
}

/// Asks the grader model to score `predicted` against `gold`, reprompting
/// once with a stricter instruction if the first reply has no unique score.
pub fn grade_via_backend(
    backend: &dyn CompletionBackend,
    grader: &RoleConfig,
    predicted: &str,
    gold: &str,
) -> Result<f64> {
    if predicted.trim().is_empty() || gold.trim().is_empty() {
        return Err(GatewayError::Transcript("grading needs nonempty predicted and gold diagnoses".into()));
    }
    let mut messages = grader_messages(grader, predicted, gold)?;
    let first = backend.complete(grader, &messages, 0)?;
    if let Some(score) = parse_grade(&first) {
        return Ok(score);
    }
    messages.push(ChatMessage::assistant(first));
    messages.push(ChatMessage::user(STRICT_REPROMPT));
    let second = backend.complete(grader, &messages, 0)?;
    parse_grade(&second).ok_or(GatewayError::UnparseableGrade(second))
}
