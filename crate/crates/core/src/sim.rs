//! A seedable diagnostic-interview game standing in for the patient,
//! diagnostician and grader models.
//!
//! Diagnoses are abstract boolean signatures over a fixed set of finding
//! slots. The doctor picks one question per turn; the patient reveals slots
//! according to the question kind; after the last turn the diagnostician
//! picks the best-matching diagnosis and the grader scores it.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebank::CaseRecord;
use crate::forest::Role;
use crate::policy::{ActionId, PolicyError, PolicyParams, StateId};
use crate::trainer::InterviewEnv;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("game spec has no diagnoses")]
    NoDiagnoses,
    #[error("invalid game spec: {0}")]
    InvalidSpec(String),
    #[error("unknown diagnosis `{0}`")]
    UnknownDiagnosis(String),
    #[error("unknown question action {0}")]
    UnknownAction(ActionId),
    #[error("case `{case}` does not encode a finding signature: {reason}")]
    BadCase { case: String, reason: String },
    #[error("interview already finished after {0} turns")]
    InterviewOver(u32),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub id: String,
    pub family: String,
    /// Finding present (true) or absent (false), one entry per slot.
    pub signature: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slot")]
pub enum QuestionKind {
    /// Open question: the patient volunteers several findings.
    Broad,
    /// Asks about one finding in detail.
    Targeted(usize),
    /// Closed question about one finding.
    YesNo(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionAction {
    pub id: ActionId,
    pub kind: QuestionKind,
    /// 1 (needs several sentences to answer) through 5 (yes/no).
    pub broadness_likert: u8,
    pub reveal_budget: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    /// Human-readable finding names, one per slot.
    pub findings: Vec<String>,
    pub diagnoses: Vec<Diagnosis>,
    pub question_actions: Vec<QuestionAction>,
    /// Probability that a reply withholds one revelation.
    pub noise: f64,
}

impl Default for GameSpec {
    /// Ten diagnoses in five families of two over eight findings; one broad
    /// question, eight targeted and eight yes/no questions; noise 0.1.
    fn default() -> Self {
        const FINDINGS: [&str; 8] = [
            "fever",
            "cough",
            "chest pain",
            "headache",
            "rash",
            "abdominal pain",
            "fatigue",
            "joint pain",
        ];
        // Every signature has four present findings, so none contains
        // another. In fam0 to fam2 both members share their first three
        // present findings in slot order, so one broad question cannot split
        // them; a follow-up on the fourth finding can.
        const SIGNATURES: [(&str, &str, [usize; 4]); 10] = [
            ("dx00", "fam0", [0, 1, 2, 3]),
            ("dx01", "fam0", [0, 1, 2, 4]),
            ("dx02", "fam1", [0, 3, 5, 6]),
            ("dx03", "fam1", [0, 3, 5, 7]),
            ("dx04", "fam2", [1, 2, 5, 6]),
            ("dx05", "fam2", [1, 2, 5, 7]),
            ("dx06", "fam3", [1, 4, 6, 7]),
            ("dx07", "fam3", [1, 3, 6, 7]),
            ("dx08", "fam4", [2, 4, 6, 7]),
            ("dx09", "fam4", [2, 3, 4, 7]),
        ];
        let slots = FINDINGS.len();
        let diagnoses = SIGNATURES
            .iter()
            .map(|(id, fam, present)| Diagnosis {
                id: id.to_string(),
                family: fam.to_string(),
                signature: (0..slots).map(|s| present.contains(&s)).collect(),
            })
            .collect();
        let mut question_actions = vec![QuestionAction {
            id: 0,
            kind: QuestionKind::Broad,
            broadness_likert: 2,
            reveal_budget: 3,
        }];
        for slot in 0..slots {
            question_actions.push(QuestionAction {
                id: question_actions.len(),
                kind: QuestionKind::Targeted(slot),
                broadness_likert: 4,
                reveal_budget: 1,
            });
        }
        for slot in 0..slots {
            question_actions.push(QuestionAction {
                id: question_actions.len(),
                kind: QuestionKind::YesNo(slot),
                broadness_likert: 5,
                reveal_budget: 1,
            });
        }
        GameSpec {
            findings: FINDINGS.iter().map(|s| s.to_string()).collect(),
            diagnoses,
            question_actions,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finding {
    Unknown,
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterviewState {
    pub revealed: Vec<Finding>,
    /// Doctor questions answered so far.
    pub turn: u32,
}

impl InterviewState {
    pub fn new(slots: usize) -> Self {
        Self { revealed: vec![Finding::Unknown; slots], turn: 0 }
    }

    pub fn known(&self) -> usize {
        self.revealed.iter().filter(|f| **f != Finding::Unknown).count()
    }
}

impl GameSpec {
    pub fn slots(&self) -> usize {
        self.findings.len()
    }

    pub fn action_count(&self) -> usize {
        self.question_actions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.diagnoses.is_empty() {
            return Err(SimError::NoDiagnoses);
        }
        let slots = self.slots();
        if slots == 0 {
            return Err(SimError::InvalidSpec("no finding slots".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(SimError::InvalidSpec(format!("noise {} outside [0, 1]", self.noise)));
        }
        let mut families: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, d) in self.diagnoses.iter().enumerate() {
            if d.signature.len() != slots {
                return Err(SimError::InvalidSpec(format!(
                    "{} has {} slots, expected {slots}",
                    d.id,
                    d.signature.len()
                )));
            }
            if self.diagnoses[..i].iter().any(|o| o.id == d.id) {
                return Err(SimError::InvalidSpec(format!("duplicate diagnosis id {}", d.id)));
            }
            if self.diagnoses[..i].iter().any(|o| o.signature == d.signature) {
                return Err(SimError::InvalidSpec(format!("{} repeats a signature", d.id)));
            }
            *families.entry(&d.family).or_default() += 1;
        }
        if let Some((fam, _)) = families.iter().find(|(_, n)| **n < 2) {
            return Err(SimError::InvalidSpec(format!("family {fam} has fewer than two members")));
        }
        for (i, a) in self.question_actions.iter().enumerate() {
            if a.id != i {
                return Err(SimError::InvalidSpec(format!("action {i} carries id {}", a.id)));
            }
            if !(1..=5).contains(&a.broadness_likert) {
                return Err(SimError::InvalidSpec(format!("action {i} Likert outside 1..5")));
            }
            match a.kind {
                QuestionKind::Broad if a.reveal_budget < 2 => {
                    return Err(SimError::InvalidSpec(format!(
                        "broad action {i} must reveal at least two slots"
                    )))
                }
                QuestionKind::Targeted(s) | QuestionKind::YesNo(s) => {
                    if s >= slots {
                        return Err(SimError::InvalidSpec(format!("action {i} asks slot {s}")));
                    }
                    if a.reveal_budget != 1 {
                        return Err(SimError::InvalidSpec(format!(
                            "action {i} must reveal exactly one slot"
                        )));
                    }
                }
                QuestionKind::Broad => {}
            }
        }
        Ok(())
    }

    pub fn diagnosis(&self, id: &str) -> Result<&Diagnosis> {
        self.diagnoses
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| SimError::UnknownDiagnosis(id.to_string()))
    }

    pub fn action(&self, id: ActionId) -> Result<&QuestionAction> {
        self.question_actions.get(id).ok_or(SimError::UnknownAction(id))
    }

    /// Observable states: one per (turn, tri-state pattern) for turns
    /// before `depth`.
    pub fn state_count(&self, depth: u32) -> usize {
        depth as usize * 3usize.pow(self.slots() as u32)
    }

    /// Dense index of an interview state within the policy table.
    pub fn state_id(&self, state: &InterviewState) -> StateId {
        let pattern = state.revealed.iter().rev().fold(0usize, |acc, f| {
            acc * 3
                + match f {
                    Finding::Unknown => 0,
                    Finding::Present => 1,
                    Finding::Absent => 2,
                }
        });
        StateId(state.turn as usize * 3usize.pow(self.slots() as u32) + pattern)
    }

    pub fn new_policy(&self, depth: u32) -> PolicyParams {
        PolicyParams::zeros(self.state_count(depth), self.action_count())
    }

    pub fn question_text(&self, action: ActionId) -> Result<String> {
        let a = self.action(action)?;
        Ok(match a.kind {
            QuestionKind::Broad => "Can you tell me more? Have you noticed any other symptoms?".into(),
            QuestionKind::Targeted(s) => {
                format!("What is the duration of your {}?", self.findings[s])
            }
            QuestionKind::YesNo(s) => format!("Do you have any {}?", self.findings[s]),
        })
    }

    fn facts_for(&self, signature: &[bool]) -> Vec<String> {
        self.findings
            .iter()
            .zip(signature)
            .map(|(name, &p)| format!("{name}: {}", if p { "present" } else { "absent" }))
            .collect()
    }

    /// Recovers the finding signature the patient knows from a case's
    /// clinical facts.
    pub fn case_signature(&self, case: &CaseRecord) -> Result<Vec<bool>> {
        let bad = |reason: String| SimError::BadCase { case: case.case_id.clone(), reason };
        if case.clinical_facts.len() != self.slots() {
            return Err(bad(format!(
                "{} facts for {} slots",
                case.clinical_facts.len(),
                self.slots()
            )));
        }
        self.findings
            .iter()
            .zip(&case.clinical_facts)
            .map(|(name, fact)| match fact.strip_prefix(name.as_str()) {
                Some(": present") => Ok(true),
                Some(": absent") => Ok(false),
                _ => Err(bad(format!("unexpected fact `{fact}`"))),
            })
            .collect()
    }

    /// Samples cases uniformly with replacement over the diagnoses.
    pub fn generate_case_bank(&self, seed: u64, n_cases: usize) -> Result<Vec<CaseRecord>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cases = (0..n_cases)
            .map(|i| {
                let d = self.diagnoses.choose(&mut rng).expect("validated nonempty");
                let chief = d
                    .signature
                    .iter()
                    .position(|&p| p)
                    .map(|s| self.findings[s].as_str())
                    .unwrap_or("a general complaint");
                CaseRecord {
                    case_id: format!("sim-{seed}-{i:04}"),
                    intro: format!("Adult patient presenting with {chief}."),
                    clinical_facts: self.facts_for(&d.signature),
                    diagnosis: d.id.clone(),
                    family: Some(d.family.clone()),
                }
            })
            .collect();
        Ok(cases)
    }

    /// The patient's answer to one question. Broad questions reveal up to
    /// `reveal_budget` unknown slots, present findings first and then in slot
    /// order; targeted and yes/no questions reveal the queried slot. With
    /// probability `noise` one would-be revelation is withheld.
    pub fn patient_reply<R: Rng>(
        &self,
        case: &CaseRecord,
        state: &InterviewState,
        action: ActionId,
        rng: &mut R,
    ) -> Result<(InterviewState, String)> {
        let signature = self.case_signature(case)?;
        let a = self.action(action)?;
        let mut reveal: Vec<usize> = match a.kind {
            QuestionKind::Broad => {
                let mut unknown: Vec<usize> = (0..self.slots())
                    .filter(|&s| state.revealed[s] == Finding::Unknown)
                    .collect();
                unknown.sort_by_key(|&s| (!signature[s], s));
                unknown.truncate(a.reveal_budget as usize);
                unknown
            }
            QuestionKind::Targeted(s) | QuestionKind::YesNo(s) => {
                if state.revealed[s] == Finding::Unknown {
                    vec![s]
                } else {
                    Vec::new()
                }
            }
        };
        let withhold = rng.gen_bool(self.noise);
        let mut withheld = None;
        if withhold && !reveal.is_empty() {
            let i = rng.gen_range(0..reveal.len());
            withheld = Some(reveal.remove(i));
        }

        let mut next = state.clone();
        next.turn += 1;
        for &s in &reveal {
            next.revealed[s] = if signature[s] { Finding::Present } else { Finding::Absent };
        }
        let text = self.reply_text(a.kind, &signature, state, &reveal, withheld);
        Ok((next, text))
    }

    fn reply_text(
        &self,
        kind: QuestionKind,
        signature: &[bool],
        before: &InterviewState,
        reveal: &[usize],
        withheld: Option<usize>,
    ) -> String {
        let name = |s: usize| self.findings[s].as_str();
        match kind {
            QuestionKind::Broad => {
                let present: Vec<&str> =
                    reveal.iter().filter(|&&s| signature[s]).map(|&s| name(s)).collect();
                let absent: Vec<&str> =
                    reveal.iter().filter(|&&s| !signature[s]).map(|&s| name(s)).collect();
                let mut parts = Vec::new();
                if !present.is_empty() {
                    parts.push(format!("I have been having {}.", present.join(", ")));
                }
                if !absent.is_empty() {
                    parts.push(format!("I have not had any {}.", absent.join(", ")));
                }
                if parts.is_empty() {
                    "Nothing else comes to mind.".into()
                } else {
                    parts.join(" ")
                }
            }
            QuestionKind::Targeted(s) => match (reveal.first(), withheld) {
                (Some(_), _) if signature[s] => format!("The {} started a few days ago.", name(s)),
                (Some(_), _) => format!("I have not had any {}.", name(s)),
                (None, Some(_)) => "I am not sure.".into(),
                (None, None) if before.revealed[s] != Finding::Unknown => {
                    "As I said before.".into()
                }
                (None, None) => "I am not sure.".into(),
            },
            QuestionKind::YesNo(s) => match reveal.first() {
                Some(_) if signature[s] => "Yes.".into(),
                Some(_) => "No.".into(),
                None => "I am not sure.".into(),
            },
        }
    }

    /// Highest match score wins: revealed-present slots in the signature
    /// count +1, revealed-present slots outside it −1. Ties go to the
    /// lexicographically smallest id.
    pub fn diagnostician_infer(&self, state: &InterviewState) -> &str {
        let mut best: Option<(&str, i64)> = None;
        for d in &self.diagnoses {
            let score: i64 = state
                .revealed
                .iter()
                .zip(&d.signature)
                .map(|(f, &p)| match (f, p) {
                    (Finding::Present, true) => 1,
                    (Finding::Present, false) => -1,
                    _ => 0,
                })
                .sum();
            best = match best {
                Some((id, s)) if s > score || (s == score && id <= d.id.as_str()) => Some((id, s)),
                _ => Some((d.id.as_str(), score)),
            };
        }
        best.map(|(id, _)| id).unwrap_or_default()
    }

    /// 1.0 for the right diagnosis, 0.5 for one in the same family, else 0.0.
    pub fn grade_diagnosis(&self, predicted: &str, truth: &str) -> Result<f64> {
        let p = self.diagnosis(predicted)?;
        let t = self.diagnosis(truth)?;
        Ok(if p.id == t.id {
            1.0
        } else if p.family == t.family {
            0.5
        } else {
            0.0
        })
    }

    /// Plays one unbranched interview with actions sampled from `policy`.
    pub fn rollout_conversation<R: Rng>(
        &self,
        policy: &PolicyParams,
        case: &CaseRecord,
        depth: u32,
        rng: &mut R,
    ) -> Result<Rollout> {
        let mut state = InterviewState::new(self.slots());
        let mut events = Vec::with_capacity(2 * depth as usize);
        for _ in 0..depth {
            let sid = self.state_id(&state);
            let action = policy.sample(sid, rng)?;
            events.push(TranscriptEvent {
                role: Role::Doctor,
                action: Some(action),
                text: self.question_text(action)?,
            });
            let (next, reply) = self.patient_reply(case, &state, action, rng)?;
            events.push(TranscriptEvent { role: Role::Patient, action: None, text: reply });
            state = next;
        }
        let predicted = self.diagnostician_infer(&state).to_string();
        let reward = self.grade_diagnosis(&predicted, &case.diagnosis)?;
        Ok(Rollout { events, final_state: state, predicted, reward })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("game specs always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GameSpec =
            serde_json::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub role: Role,
    pub action: Option<ActionId>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub events: Vec<TranscriptEvent>,
    pub final_state: InterviewState,
    pub predicted: String,
    pub reward: f64,
}

impl Rollout {
    pub fn doctor_actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.events.iter().filter_map(|e| e.action)
    }
}

/// The game bound to a conversation depth, usable as a training environment.
#[derive(Debug, Clone)]
pub struct SimEnv {
    pub spec: GameSpec,
    pub depth: u32,
}

impl SimEnv {
    pub fn new(spec: GameSpec, depth: u32) -> Result<Self> {
        spec.validate()?;
        if depth == 0 {
            return Err(SimError::InvalidSpec("depth must be at least 1".into()));
        }
        Ok(Self { spec, depth })
    }

    pub fn new_policy(&self) -> PolicyParams {
        self.spec.new_policy(self.depth)
    }
}

impl InterviewEnv for SimEnv {
    type State = InterviewState;
    type Error = SimError;

    fn start(&self, _case: &CaseRecord) -> Result<InterviewState> {
        Ok(InterviewState::new(self.spec.slots()))
    }

    fn state_id(&self, state: &InterviewState) -> Result<StateId> {
        Ok(self.spec.state_id(state))
    }

    fn question_text(&self, action: ActionId) -> Result<String> {
        self.spec.question_text(action)
    }

    fn respond(
        &self,
        case: &CaseRecord,
        state: &InterviewState,
        action: ActionId,
        rng: &mut ChaCha8Rng,
    ) -> Result<(InterviewState, String)> {
        if state.turn >= self.depth {
            return Err(SimError::InterviewOver(state.turn));
        }
        self.spec.patient_reply(case, state, action, rng)
    }

    fn grade(&self, case: &CaseRecord, state: &InterviewState) -> Result<f64> {
        let predicted = self.spec.diagnostician_infer(state);
        self.spec.grade_diagnosis(predicted, &case.diagnosis)
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Finding::Unknown => "?",
            Finding::Present => "+",
            Finding::Absent => "-",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GameSpec {
        GameSpec::default()
    }

    fn case_for(spec: &GameSpec, id: &str) -> CaseRecord {
        let d = spec.diagnosis(id).unwrap();
        CaseRecord {
            case_id: format!("t-{id}"),
            intro: "test".into(),
            clinical_facts: spec.facts_for(&d.signature),
            diagnosis: d.id.clone(),
            family: Some(d.family.clone()),
        }
    }

    fn quiet() -> GameSpec {
        GameSpec { noise: 0.0, ..spec() }
    }

    #[test]
    fn default_spec_shape() {
        let s = spec();
        s.validate().unwrap();
        assert_eq!(s.diagnoses.len(), 10);
        assert_eq!(s.slots(), 8);
        assert_eq!(s.action_count(), 17);
        let broad: Vec<_> =
            s.question_actions.iter().filter(|a| a.kind == QuestionKind::Broad).collect();
        assert_eq!(broad.len(), 1);
        assert_eq!((broad[0].reveal_budget, broad[0].broadness_likert), (3, 2));
        let json = s.to_json();
        assert_eq!(GameSpec::from_json(&json).unwrap(), s);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = spec();
        s.diagnoses.truncate(0);
        assert!(matches!(s.validate(), Err(SimError::NoDiagnoses)));

        let mut s = spec();
        s.diagnoses[1].signature = s.diagnoses[0].signature.clone();
        assert!(s.validate().is_err());

        let mut s = spec();
        s.diagnoses[9].family = "solo".into();
        assert!(s.validate().is_err());

        let mut s = spec();
        s.question_actions[0].reveal_budget = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn case_bank_is_seeded() {
        let s = spec();
        let a = s.generate_case_bank(7, 100).unwrap();
        assert_eq!(a, s.generate_case_bank(7, 100).unwrap());
        for case in &a {
            let d = s.diagnosis(&case.diagnosis).unwrap();
            assert_eq!(s.case_signature(case).unwrap(), d.signature);
            case.validate().unwrap();
        }
        let differing = (0..20u64)
            .filter(|&k| s.generate_case_bank(k, 10).unwrap() != s.generate_case_bank(k + 100, 10).unwrap())
            .count();
        assert!(differing >= 1);
    }

    #[test]
    fn targeted_reveals_queried_slot() {
        let s = quiet();
        let case = case_for(&s, "dx00"); // present: 0,1,2,3
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = InterviewState::new(8);
        let targeted_3 = 1 + 3;
        let (next, _) = s.patient_reply(&case, &state, targeted_3, &mut rng).unwrap();
        assert_eq!(next.revealed[3], Finding::Present);
        assert_eq!(next.turn, 1);
        assert_eq!(next.known(), 1);
    }

    #[test]
    fn broad_prefers_present_findings() {
        let s = quiet();
        let case = case_for(&s, "dx00");
        let mut state = InterviewState::new(8);
        // leave two present findings (2, 3) unknown
        state.revealed[0] = Finding::Present;
        state.revealed[1] = Finding::Present;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (next, text) = s.patient_reply(&case, &state, 0, &mut rng).unwrap();
        assert_eq!(next.revealed[2], Finding::Present);
        assert_eq!(next.revealed[3], Finding::Present);
        // the third revelation is the first absent slot in order
        assert_eq!(next.revealed[4], Finding::Absent);
        assert_eq!(next.known(), 5);
        assert!(text.contains("chest pain") && text.contains("rash"));
    }

    #[test]
    fn full_noise_withholds() {
        let s = GameSpec { noise: 1.0, ..spec() };
        let case = case_for(&s, "dx00");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let yes_no_2 = 9 + 2;
        let (next, text) =
            s.patient_reply(&case, &InterviewState::new(8), yes_no_2, &mut rng).unwrap();
        assert_eq!(next.revealed[2], Finding::Unknown);
        assert_eq!(text, "I am not sure.");
    }

    #[test]
    fn diagnostician_rules() {
        let s = spec();
        assert_eq!(s.diagnostician_infer(&InterviewState::new(8)), "dx00");

        let d = s.diagnosis("dx07").unwrap();
        let state = InterviewState {
            revealed: d
                .signature
                .iter()
                .map(|&p| if p { Finding::Present } else { Finding::Absent })
                .collect(),
            turn: 2,
        };
        assert_eq!(s.diagnostician_infer(&state), "dx07");

        // slots 0,1,2 present fit dx00 and dx01 equally
        let mut tie = InterviewState::new(8);
        for slot in 0..3 {
            tie.revealed[slot] = Finding::Present;
        }
        assert_eq!(s.diagnostician_infer(&tie), "dx00");
    }

    #[test]
    fn grading_scale() {
        let s = spec();
        assert_eq!(s.grade_diagnosis("dx07", "dx07").unwrap(), 1.0);
        assert_eq!(s.grade_diagnosis("dx06", "dx07").unwrap(), 0.5);
        assert_eq!(s.grade_diagnosis("dx00", "dx07").unwrap(), 0.0);
        assert!(matches!(s.grade_diagnosis("nope", "dx07"), Err(SimError::UnknownDiagnosis(_))));
    }

    #[test]
    fn rollout_shape_and_rewards() {
        let s = spec();
        let policy = s.new_policy(2);
        let bank = s.generate_case_bank(11, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in &bank {
            let r = s.rollout_conversation(&policy, case, 2, &mut rng).unwrap();
            assert_eq!(r.events.len(), 4);
            let roles: Vec<Role> = r.events.iter().map(|e| e.role).collect();
            assert_eq!(roles, [Role::Doctor, Role::Patient, Role::Doctor, Role::Patient]);
            assert!([0.0, 0.5, 1.0].contains(&r.reward));
        }
    }

    #[test]
    fn single_action_policy_is_seed_independent() {
        let s = quiet();
        let mut policy = s.new_policy(2);
        for state in 0..policy.state_count() {
            policy.logits_mut(StateId(state)).unwrap()[0] = 1e6;
        }
        let case = case_for(&s, "dx05");
        let a = s.rollout_conversation(&policy, &case, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = s.rollout_conversation(&policy, &case, 2, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.reward, 1.0);
    }

    #[test]
    fn env_rejects_questions_past_depth() {
        let env = SimEnv::new(spec(), 1).unwrap();
        let case = case_for(&env.spec, "dx00");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = env.start(&case).unwrap();
        let (s1, _) = env.respond(&case, &s0, 0, &mut rng).unwrap();
        assert!(matches!(env.respond(&case, &s1, 0, &mut rng), Err(SimError::InterviewOver(1))));
    }

    #[test]
    fn state_ids_are_dense_and_distinct() {
        let s = spec();
        let mut a = InterviewState::new(8);
        assert_eq!(s.state_id(&a), StateId(0));
        a.revealed[7] = Finding::Absent;
        a.turn = 1;
        let id = s.state_id(&a);
        assert!(id.0 < s.state_count(2));
        assert_eq!(id.0, 6561 + 2 * 3usize.pow(7));
    }
}
