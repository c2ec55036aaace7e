//! Clipped policy-gradient training of the doctor policy on sampled forests.
//!
//! One training case samples a full forest with the current policy, grades
//! its leaves, turns rewards into per-completion advantages and takes one
//! AdamW step per epoch on the clipped surrogate objective
//!
//! ```text
//! J = mean_i [ min(r_i A_i, clip(r_i, 1-ε, 1+ε) A_i) - β k3_i ]
//! r_i = exp(logp_new - logp_old),   k3 = exp(logp_ref - logp_new) - (logp_ref - logp_new) - 1
//! ```
//!
//! Each doctor completion is a single discrete action, so its advantage
//! weights exactly one log-probability.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebank::CaseRecord;
use crate::forest::{AdvantageTable, Forest, ForestConfig, ForestError, NodeId, Role};
use crate::policy::{softmax, ActionId, PolicyError, PolicyParams, StateId};

/// Learning rate for full-size language models; kept as the export default.
pub const LLM_LEARNING_RATE: f64 = 2e-7;
/// Learning rate for the tabular doctor policy.
pub const TABULAR_LEARNING_RATE: f64 = 0.3;

pub type BoxError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("role backend failed: {0}")]
    Backend(#[source] BoxError),
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error("gradient has {found} entries, parameters have {expected}")]
    Shape { expected: usize, found: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("doctor node {0} has no advantage")]
    MissingAdvantage(NodeId),
    #[error("malformed export record at line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Sibling-relative rewards with depth-wise normalization.
    Branched,
    /// Unbranched conversations grouped per case; one advantage per
    /// conversation applied to all its turns.
    Linear,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "branched" => Ok(TrainMode::Branched),
            "linear" => Ok(TrainMode::Linear),
            other => Err(format!("unknown mode `{other}` (expected branched or linear)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub forest: ForestConfig,
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub seed: u64,
    pub epochs: u32,
}

impl TrainConfig {
    pub fn branched() -> Self {
        Self {
            mode: TrainMode::Branched,
            forest: ForestConfig::branched(),
            lr: TABULAR_LEARNING_RATE,
            clip_eps: 0.2,
            kl_coef: 0.0,
            seed: 0,
            epochs: 1,
        }
    }

    pub fn linear() -> Self {
        Self { mode: TrainMode::Linear, forest: ForestConfig::linear(), ..Self::branched() }
    }

    pub fn for_mode(mode: TrainMode) -> Self {
        match mode {
            TrainMode::Branched => Self::branched(),
            TrainMode::Linear => Self::linear(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.forest.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(TrainError::Config(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return Err(TrainError::Config(format!("kl_coef must be >= 0, got {}", self.kl_coef)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.mode == TrainMode::Linear && self.forest.branching != 1 {
            return Err(TrainError::Config(format!(
                "linear mode needs branching 1, got {}",
                self.forest.branching
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams, hyper: AdamHyper) -> Self {
        Self {
            first_moment: vec![0.0; params.len()],
            second_moment: vec![0.0; params.len()],
            step_count: 0,
            hyper,
        }
    }
}

/// One doctor decision in a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: StateId,
    pub action: ActionId,
    pub logp_old: f64,
    pub logp_ref: f64,
    pub advantage: f64,
}

/// Dense gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    pub action_count: usize,
    pub values: Vec<f64>,
}

impl GradTable {
    pub fn get(&self, state: StateId, action: ActionId) -> f64 {
        self.values[state.0 * self.action_count + action]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// min(r·A, clip(r, 1−ε, 1+ε)·A) with r = exp(logp_new − logp_old).
pub fn surrogate_term(logp_new: f64, logp_old: f64, advantage: f64, clip_eps: f64) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Non-negative per-sample KL estimator exp(d) − d − 1 with
/// d = logp_ref − logp_new.
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_new;
    d.exp() - d - 1.0
}

/// Mean clipped surrogate minus the scaled KL penalty.
pub fn objective(params: &PolicyParams, batch: &[Sample], config: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in batch {
        let lp = params.logprob(s.state, s.action)?;
        total += surrogate_term(lp, s.logp_old, s.advantage, config.clip_eps)
            - config.kl_coef * kl_penalty(lp, s.logp_ref);
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`objective`] with respect to every logit.
pub fn policy_gradient(
    params: &PolicyParams,
    batch: &[Sample],
    config: &TrainConfig,
) -> Result<GradTable> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let k = params.action_count();
    let mut values = vec![0.0; params.len()];
    for s in batch {
        let row = params.logits(s.state)?;
        params.offset(s.state, s.action)?;
        let probs = softmax(row);
        let lp = probs[s.action].ln();
        let ratio = (lp - s.logp_old).exp();
        let clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        // d/d logp of the selected surrogate branch; the clipped branch is flat
        let surrogate = if ratio * s.advantage <= clipped * s.advantage {
            ratio * s.advantage
        } else {
            0.0
        };
        let kl = config.kl_coef * (1.0 - (s.logp_ref - lp).exp());
        let coef = (surrogate - kl) / n;
        if coef == 0.0 {
            continue;
        }
        let base = s.state.0 * k;
        for (a, p) in probs.iter().enumerate() {
            let indicator = if a == s.action { 1.0 } else { 0.0 };
            values[base + a] += coef * (indicator - p);
        }
    }
    Ok(GradTable { action_count: k, values })
}

/// One AdamW step with bias-corrected moments and decoupled weight decay.
/// `grad` is the gradient of the loss being minimized.
pub fn adamw_step(
    params: &PolicyParams,
    grad: &GradTable,
    opt: &OptimizerState,
) -> Result<(PolicyParams, OptimizerState)> {
    let mut params = params.clone();
    let mut opt = opt.clone();
    adamw_step_in_place(&mut params, grad, &mut opt)?;
    Ok((params, opt))
}

fn adamw_step_in_place(
    params: &mut PolicyParams,
    grad: &GradTable,
    opt: &mut OptimizerState,
) -> Result<()> {
    let n = params.len();
    if grad.values.len() != n || opt.first_moment.len() != n || opt.second_moment.len() != n {
        return Err(TrainError::Shape { expected: n, found: grad.values.len() });
    }
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(i));
    }
    let h = opt.hyper;
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let theta = params.as_mut_slice();
    for i in 0..n {
        let g = grad.values[i];
        let m = h.beta1 * opt.first_moment[i] + (1.0 - h.beta1) * g;
        let v = h.beta2 * opt.second_moment[i] + (1.0 - h.beta2) * g * g;
        opt.first_moment[i] = m;
        opt.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        theta[i] -= h.lr * h.weight_decay * theta[i];
        theta[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

/// The environment side of an interview: patient replies, the
/// diagnostician and the grader. The doctor is the policy being trained.
pub trait InterviewEnv {
    type State: Clone;
    type Error: std::error::Error + Send + Sync + 'static;

    fn start(&self, case: &CaseRecord) -> Result<Self::State, Self::Error>;
    fn state_id(&self, state: &Self::State) -> Result<StateId, Self::Error>;
    fn question_text(&self, action: ActionId) -> Result<String, Self::Error>;
    fn respond(
        &self,
        case: &CaseRecord,
        state: &Self::State,
        action: ActionId,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self::State, String), Self::Error>;
    /// Diagnoses from the final state and grades against the case's gold
    /// diagnosis.
    fn grade(&self, case: &CaseRecord, state: &Self::State) -> Result<f64, Self::Error>;
}

/// The decision recorded at a doctor node during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub state: StateId,
    pub action: ActionId,
    pub logp_old: f64,
}

#[derive(Debug, Clone)]
pub struct SampledForest {
    pub forest: Forest,
    pub decisions: BTreeMap<NodeId, Decision>,
}

/// Samples and grades a forest for `case` with doctor actions drawn from
/// `policy`. Nodes are expanded depth-first in id order, so the result is a
/// pure function of the inputs and the rng stream.
pub fn sample_forest<E: InterviewEnv>(
    policy: &PolicyParams,
    case: &CaseRecord,
    env: &E,
    config: ForestConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampledForest> {
    let mut forest = Forest::build_skeleton(config, case.case_id.clone())?;
    let mut decisions = BTreeMap::new();
    let start = env.start(case).map_err(|e| TrainError::Backend(Box::new(e)))?;
    let roots = forest.roots().to_vec();
    let mut stack: Vec<(NodeId, E::State)> = roots.into_iter().rev().map(|r| (r, start.clone())).collect();
    while let Some((doctor, state)) = stack.pop() {
        let backend = |e: E::Error| TrainError::Backend(Box::new(e));
        let sid = env.state_id(&state).map_err(backend)?;
        let action = policy.sample(sid, rng)?;
        let logp_old = policy.logprob(sid, action)?;
        decisions.insert(doctor, Decision { state: sid, action, logp_old });
        forest.node_mut(doctor)?.content = env.question_text(action).map_err(backend)?;

        let (next, reply) = env.respond(case, &state, action, rng).map_err(backend)?;
        let patient = forest.reply_of(doctor)?;
        forest.node_mut(patient)?.content = reply;

        let children = forest.doctor_children(doctor)?;
        if children.is_empty() {
            let reward = env.grade(case, &next).map_err(backend)?;
            forest.set_leaf_reward(doctor, reward)?;
        } else {
            stack.extend(children.into_iter().rev().map(|c| (c, next.clone())));
        }
    }
    Ok(SampledForest { forest, decisions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStats {
    pub case_id: String,
    /// Doctor completions in the forest.
    pub completions: usize,
    /// Leaf completions scored by the grader.
    pub graded_leaves: usize,
    pub mean_leaf_reward: f64,
    pub skipped: bool,
    /// Loss before the first update; absent for skipped cases.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub params: PolicyParams,
    pub opt: OptimizerState,
    pub stats: CaseStats,
    pub sampled: SampledForest,
    pub advantages: Option<AdvantageTable>,
}

/// Samples, grades and trains on one case. Parameters and optimizer state
/// come back untouched when the case is skipped; errors leave the inputs
/// as they were.
pub fn train_case<E: InterviewEnv>(
    params: &PolicyParams,
    opt: &OptimizerState,
    reference: &PolicyParams,
    case: &CaseRecord,
    env: &E,
    config: &TrainConfig,
    seed: u64,
) -> Result<CaseOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = sample_forest(params, case, env, config.forest, &mut rng)?;
    let rewards = sampled.forest.leaf_rewards()?;
    let mut stats = CaseStats {
        case_id: case.case_id.clone(),
        completions: sampled.forest.doctor_nodes().count(),
        graded_leaves: rewards.len(),
        mean_leaf_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        skipped: false,
        loss: None,
    };
    if sampled.forest.should_skip()? {
        stats.skipped = true;
        return Ok(CaseOutcome {
            params: params.clone(),
            opt: opt.clone(),
            stats,
            sampled,
            advantages: None,
        });
    }

    let table = match config.mode {
        TrainMode::Branched => sampled.forest.compute_advantages()?,
        TrainMode::Linear => sampled.forest.compute_linear_advantages()?,
    };
    let batch = sampled
        .decisions
        .iter()
        .map(|(&node, d)| {
            Ok(Sample {
                state: d.state,
                action: d.action,
                logp_old: d.logp_old,
                logp_ref: reference.logprob(d.state, d.action)?,
                advantage: table.get(node).ok_or(TrainError::MissingAdvantage(node))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut new_params = params.clone();
    let mut new_opt = opt.clone();
    for epoch in 0..config.epochs {
        if epoch == 0 {
            stats.loss = Some(-objective(&new_params, &batch, config)?);
        }
        let mut grad = policy_gradient(&new_params, &batch, config)?;
        // ascend the objective
        grad.values.iter_mut().for_each(|g| *g = -*g);
        adamw_step_in_place(&mut new_params, &grad, &mut new_opt)?;
    }
    Ok(CaseOutcome { params: new_params, opt: new_opt, stats, sampled, advantages: Some(table) })
}

/// A message in the conversation preceding a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixMessage {
    pub role: Role,
    pub content: String,
}

/// One doctor completion with its advantage, for external fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub case_id: String,
    pub node_id: NodeId,
    pub depth: u32,
    pub prefix_messages: Vec<PrefixMessage>,
    pub completion: String,
    pub advantage: f64,
    pub reward_raw: f64,
}

/// Export records for every doctor node, in node order. Advantages and raw
/// rewards must already be on the nodes.
pub fn training_export(forest: &Forest) -> Result<Vec<ExportRecord>> {
    let mut out = Vec::new();
    for node in forest.doctor_nodes() {
        let path = forest.path_to(node.node_id)?;
        let prefix = path[..path.len() - 1]
            .iter()
            .map(|&id| {
                let n = forest.node(id)?;
                Ok(PrefixMessage { role: n.role, content: n.content.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ExportRecord {
            case_id: forest.case_id.clone(),
            node_id: node.node_id,
            depth: node.depth,
            prefix_messages: prefix,
            completion: node.content.clone(),
            advantage: node.advantage.ok_or(TrainError::MissingAdvantage(node.node_id))?,
            reward_raw: node
                .reward_raw
                .ok_or(ForestError::IncompleteGrading(node.node_id))?,
        });
    }
    Ok(out)
}

pub fn write_export<W: Write>(mut out: W, records: &[ExportRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| TrainError::Record { line: 0, reason: e.to_string() })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_export<R: BufRead>(input: R) -> Result<Vec<ExportRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TrainError::Record { line: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}
