//! Case records for diagnostic interviews and their JSON-lines bank format.
//!
//! A record carries a one-line introduction that the interviewer sees, the
//! clinical facts only the patient knows, and the gold diagnosis.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("duplicate case_id `{0}`")]
    Duplicate(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("read failed: {0}")]
    Read(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CaseError>,
    },
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub intro: String,
    pub clinical_facts: Vec<String>,
    pub diagnosis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    case_id: Option<String>,
    intro: Option<String>,
    clinical_facts: Option<Vec<String>>,
    diagnosis: Option<String>,
    #[serde(default)]
    family: Option<String>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.case_id.trim().is_empty() {
            return Err(CaseError::InvalidField { field: "case_id", reason: "empty".into() });
        }
        if self.intro.trim().is_empty() {
            return Err(CaseError::InvalidField { field: "intro", reason: "empty".into() });
        }
        if self.intro.contains(['\n', '\r']) {
            return Err(CaseError::InvalidField {
                field: "intro",
                reason: "must be a single line".into(),
            });
        }
        if self.clinical_facts.is_empty() {
            return Err(CaseError::InvalidField {
                field: "clinical_facts",
                reason: "must list at least one fact".into(),
            });
        }
        if self.clinical_facts.iter().any(|f| f.trim().is_empty()) {
            return Err(CaseError::InvalidField {
                field: "clinical_facts",
                reason: "facts must be nonempty".into(),
            });
        }
        if self.diagnosis.trim().is_empty() {
            return Err(CaseError::InvalidField { field: "diagnosis", reason: "empty".into() });
        }
        if matches!(&self.family, Some(f) if f.trim().is_empty()) {
            return Err(CaseError::InvalidField { field: "family", reason: "empty".into() });
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("case records always serialize")
    }
}

/// Parses and validates one JSON object.
pub fn parse_case_record(line: &str) -> Result<CaseRecord, CaseError> {
    let raw: RawRecord = serde_json::from_str(line)?;
    let record = CaseRecord {
        case_id: raw.case_id.ok_or(CaseError::MissingField("case_id"))?,
        intro: raw.intro.ok_or(CaseError::MissingField("intro"))?,
        clinical_facts: raw.clinical_facts.ok_or(CaseError::MissingField("clinical_facts"))?,
        diagnosis: raw.diagnosis.ok_or(CaseError::MissingField("diagnosis"))?,
        family: raw.family,
    };
    record.validate()?;
    Ok(record)
}

/// Reads a bank, preserving order. The first invalid line aborts the load
/// with its 1-based line number. Blank lines are ignored.
pub fn read_bank<R: BufRead>(input: R) -> Result<Vec<CaseRecord>, CaseError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let at = |e: CaseError| CaseError::AtLine { line: i + 1, source: Box::new(e) };
        let line = line.map_err(|e| at(CaseError::Read(e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_case_record(&line).map_err(at)?;
        if !seen.insert(record.case_id.clone()) {
            return Err(at(CaseError::Duplicate(record.case_id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_bank(path: &Path) -> Result<Vec<CaseRecord>, CaseError> {
    let file = std::fs::File::open(path)
        .map_err(|source| CaseError::Io { path: path.display().to_string(), source })?;
    read_bank(std::io::BufReader::new(file))
}

pub fn write_bank<W: Write>(mut out: W, cases: &[CaseRecord]) -> std::io::Result<()> {
    for case in cases {
        writeln!(out, "{}", case.to_json_line())?;
    }
    Ok(())
}

/// Hex SHA-256 over the bank's canonical JSON-lines serialization.
pub fn bank_hash(cases: &[CaseRecord]) -> String {
    let mut hasher = Sha256::new();
    for case in cases {
        hasher.update(case.to_json_line().as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Stable identifier for an exam question, used to tie an extraction reply
/// back to its source.
pub fn question_case_id(question: &str) -> String {
    let digest = Sha256::digest(question.as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("q-{hex}")
}

const EXTRACTION_TEMPLATE: &str = "\
You are converting a medical board exam question into a case for a simulated \
doctor-patient interview.

Extract exactly three components from the question and its answer:
1. intro: a concise, one-line case introduction (patient age, gender and chief complaint). No line breaks.
2. clinical_facts: a detailed list of the relevant clinical information, such as medical history, presenting symptoms, exam and test findings. One fact per list item.
3. diagnosis: the final diagnosis as stated in, or inferred from, the answer key.

Reply with a single JSON object on one line and nothing else, using exactly these keys:
{\"case_id\": \"{case_id}\", \"intro\": \"...\", \"clinical_facts\": [\"...\", \"...\"], \"diagnosis\": \"...\"}

Question:
{question}

Answer:
{answer}
";

/// Prompt instructing a model to extract a [`CaseRecord`] from an exam
/// question and its answer. A reply honoring the contract parses with
/// [`parse_case_record`].
pub fn extraction_prompt(question: &str, answer: &str) -> String {
    // Split on the placeholders rather than replacing them so that braces in
    // the question or answer text are never treated as template slots.
    let (head, rest) = EXTRACTION_TEMPLATE.split_once("{question}").expect("template slot");
    let (middle, tail) = rest.split_once("{answer}").expect("template slot");
    let head = head.replace("{case_id}", &question_case_id(question));
    format!("{head}{}{middle}{}{tail}", question.trim(), answer.trim())
}
