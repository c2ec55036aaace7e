//! Role prompt rendering.

use std::sync::OnceLock;

use regex::Regex;
use scf_core::casebank::CaseRecord;
use serde::{Deserialize, Serialize};

use crate::config::{RoleConfig, RoleKind};
use crate::{GatewayError, Result};

/// One chat-completions message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Doctor,
    Patient,
    /// The diagnostician's answer; only valid as the final turn.
    Diagnostician,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self { speaker, text: text.into() }
    }
}

pub const GRADE_SCALE_TEXT: &str = "1.0 = exact or clinically equivalent diagnosis\n\
0.5 = partially correct or closely related diagnosis\n\
0.0 = incorrect diagnosis";

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid pattern"))
}

/// Fails if the template uses a placeholder the role may not see.
pub fn check_template(role: RoleKind, template: &str) -> Result<()> {
    let allowed = role.allowed_placeholders();
    for cap in placeholder_re().captures_iter(template) {
        let name = &cap[1];
        if !allowed.contains(&name) {
            return Err(GatewayError::Template {
                role,
                reason: format!("placeholder `{{{name}}}` is not available to this role"),
            });
        }
    }
    Ok(())
}

/// Single-pass substitution, so values containing braces stay literal.
fn fill(role: RoleKind, template: &str, values: &[(&str, &str)]) -> Result<String> {
    check_template(role, template)?;
    Ok(placeholder_re()
        .replace_all(template, |cap: &regex::Captures<'_>| {
            values
                .iter()
                .find(|(k, _)| *k == &cap[1])
                .map(|(_, v)| v.to_string())
                .unwrap_or_default()
        })
        .into_owned())
}

/// Doctor and patient turns must alternate starting with the doctor; a
/// diagnostician turn may only close the transcript.
fn check_alternation(transcript: &[Turn]) -> Result<()> {
    for (i, turn) in transcript.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::Doctor } else { Speaker::Patient };
        if turn.speaker == Speaker::Diagnostician {
            if i + 1 != transcript.len() || i % 2 == 1 || i == 0 {
                return Err(GatewayError::Transcript(format!(
                    "diagnostician turn at position {i} must follow a patient reply and end the transcript"
                )));
            }
            continue;
        }
        if turn.speaker != expected {
            return Err(GatewayError::Transcript(format!(
                "turn {i} is from {:?}, expected {:?}",
                turn.speaker, expected
            )));
        }
    }
    Ok(())
}

fn interview_text(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| match t.speaker {
            Speaker::Doctor => format!("Doctor: {}", t.text),
            Speaker::Patient => format!("Patient: {}", t.text),
            Speaker::Diagnostician => format!("Diagnosis: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds the message list sent to `config.role`'s model.
///
/// The doctor speaks next when the transcript is empty or ends with the
/// patient. The patient needs a transcript ending in a doctor question. The
/// diagnostician needs a finished interview ending in a patient reply. The
/// grader needs the transcript to end with the diagnostician's answer, which
/// it scores against the case's gold diagnosis.
pub fn render_role_prompt(
    config: &RoleConfig,
    case: &CaseRecord,
    transcript: &[Turn],
) -> Result<Vec<ChatMessage>> {
    check_alternation(transcript)?;
    let last = transcript.last().map(|t| t.speaker);
    let role = config.role;
    match role {
        RoleKind::Doctor => {
            if last == Some(Speaker::Doctor) || last == Some(Speaker::Diagnostician) {
                return Err(GatewayError::Transcript("the doctor speaks only after a patient reply".into()));
            }
            let system = fill(role, &config.system_prompt, &[("intro", &case.intro)])?;
            let mut out = vec![ChatMessage::system(system), ChatMessage::user(case.intro.clone())];
            for t in transcript {
                out.push(match t.speaker {
                    Speaker::Doctor => ChatMessage::assistant(t.text.clone()),
                    _ => ChatMessage::user(t.text.clone()),
                });
            }
            Ok(out)
        }
        RoleKind::Patient => {
            if last != Some(Speaker::Doctor) {
                return Err(GatewayError::Transcript(
                    "the patient answers a doctor question and never speaks first".into(),
                ));
            }
            let facts: String =
                case.clinical_facts.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n");
            let system = fill(
                role,
                &config.system_prompt,
                &[("intro", &case.intro), ("facts", &facts), ("diagnosis", &case.diagnosis)],
            )?;
            let mut out = vec![ChatMessage::system(system)];
            for t in transcript {
                out.push(match t.speaker {
                    Speaker::Doctor => ChatMessage::user(t.text.clone()),
                    _ => ChatMessage::assistant(t.text.clone()),
                });
            }
            Ok(out)
        }
        RoleKind::Diagnostician => {
            if last != Some(Speaker::Patient) {
                return Err(GatewayError::Transcript(
                    "the diagnostician needs an interview ending in a patient reply".into(),
                ));
            }
            let system = fill(role, &config.system_prompt, &[("intro", &case.intro)])?;
            Ok(vec![ChatMessage::system(system), ChatMessage::user(interview_text(transcript))])
        }
        RoleKind::Grader => {
            let predicted = match transcript.last() {
                Some(t) if t.speaker == Speaker::Diagnostician => t.text.as_str(),
                _ => {
                    return Err(GatewayError::Transcript(
                        "the grader needs a transcript ending in the diagnostician's answer".into(),
                    ))
                }
            };
            grader_messages(config, predicted, &case.diagnosis)
        }
    }
}

/// Grader prompt for a bare (predicted, gold) pair.
pub fn grader_messages(config: &RoleConfig, predicted: &str, gold: &str) -> Result<Vec<ChatMessage>> {
    let system = fill(RoleKind::Grader, &config.system_prompt, &[("scale", GRADE_SCALE_TEXT)])?;
    let user = format!(
        "Predicted diagnosis: {}\nCorrect diagnosis: {}\nScore (1.0, 0.5 or 0.0):",
        predicted.trim(),
        gold.trim()
    );
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
}
