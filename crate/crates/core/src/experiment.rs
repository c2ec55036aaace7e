//! Training runs, held-out evaluation and the branched-vs-linear comparison
//! on the simulated clinic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebank::CaseRecord;
use crate::evalkit::{self, CurvePoint, EvalError, TTestResult};
use crate::policy::{ActionId, PolicyParams};
use crate::sim::{GameSpec, SimEnv, SimError};
use crate::trainer::{self, AdamHyper, CaseStats, OptimizerState, TrainConfig, TrainError, TrainMode};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint does not fit this run: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// SplitMix64 finalizer; decorrelates per-step and per-purpose seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TRAIN_BANK_STREAM: u64 = 1;
const EVAL_BANK_STREAM: u64 = 2;
const EVAL_ROLLOUT_STREAM: u64 = 3;
const STEP_STREAM: u64 = 1 << 32;

pub fn train_bank_seed(seed: u64) -> u64 {
    mix_seed(seed, TRAIN_BANK_STREAM)
}

pub fn eval_bank_seed(seed: u64) -> u64 {
    mix_seed(seed, EVAL_BANK_STREAM)
}

/// Seed for the rollouts of training step `step` (1-based).
pub fn step_seed(seed: u64, step: u64) -> u64 {
    mix_seed(seed, STEP_STREAM + step)
}

/// Parameters and optimizer state after some number of training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub steps_completed: u64,
    pub params: PolicyParams,
    pub opt: OptimizerState,
    pub curve: Vec<CurvePoint>,
}

impl Checkpoint {
    pub fn fresh(env: &SimEnv, config: &TrainConfig) -> Self {
        let params = env.new_policy();
        let opt = OptimizerState::new(&params, AdamHyper::with_lr(config.lr));
        Self { steps_completed: 0, params, opt, curve: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub stats: Vec<CaseStats>,
}

impl TrainRun {
    pub fn skipped(&self) -> usize {
        self.stats.iter().filter(|s| s.skipped).count()
    }
}

/// Trains over `bank` in order, one case per step, continuing from `start`
/// and stopping after `max_steps` new steps if given. The reference policy
/// for the KL term is the untrained policy.
pub fn train_on_bank(
    env: &SimEnv,
    bank: &[CaseRecord],
    config: &TrainConfig,
    start: Checkpoint,
    max_steps: Option<u64>,
) -> Result<TrainRun> {
    config.validate()?;
    if start.params.state_count() != env.spec.state_count(env.depth)
        || start.params.action_count() != env.spec.action_count()
    {
        return Err(ExperimentError::Checkpoint("policy table shape differs".into()));
    }
    if start.steps_completed > bank.len() as u64 {
        return Err(ExperimentError::Checkpoint(format!(
            "{} steps completed but bank has {} cases",
            start.steps_completed,
            bank.len()
        )));
    }
    let reference = env.new_policy();
    let mut ck = start;
    let mut stats = Vec::new();
    let begin = ck.steps_completed as usize;
    let end = match max_steps {
        Some(m) => (begin + m as usize).min(bank.len()),
        None => bank.len(),
    };
    for (i, case) in bank.iter().enumerate().take(end).skip(begin) {
        let step = i as u64 + 1;
        let outcome = trainer::train_case(
            &ck.params,
            &ck.opt,
            &reference,
            case,
            env,
            config,
            step_seed(config.seed, step),
        )?;
        ck.params = outcome.params;
        ck.opt = outcome.opt;
        ck.steps_completed = step;
        ck.curve.push(CurvePoint { step, mean_reward: outcome.stats.mean_leaf_reward });
        stats.push(outcome.stats);
    }
    Ok(TrainRun { checkpoint: ck, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub percentage: f64,
    /// Mean Likert broadness of every doctor question asked.
    pub mean_broadness: f64,
    pub grades: Vec<f64>,
    pub questions: Vec<String>,
    pub actions: Vec<ActionId>,
}

/// One sampled linear interview per held-out case, scored by the grader.
pub fn evaluate(env: &SimEnv, policy: &PolicyParams, bank: &[CaseRecord], seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, EVAL_ROLLOUT_STREAM));
    let mut grades = Vec::with_capacity(bank.len());
    let mut questions = Vec::new();
    let mut actions = Vec::new();
    for case in bank {
        let rollout = env.spec.rollout_conversation(policy, case, env.depth, &mut rng)?;
        grades.push(rollout.reward);
        for e in &rollout.events {
            if let Some(a) = e.action {
                actions.push(a);
                questions.push(e.text.clone());
            }
        }
    }
    let likert = actions
        .iter()
        .map(|&a| env.spec.action(a).map(|q| q.broadness_likert))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        percentage: evalkit::score_test_set(&grades)?,
        mean_broadness: evalkit::mean_likert(likert).unwrap_or(f64::NAN),
        grades,
        questions,
        actions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub seeds: Vec<u64>,
    pub train_cases: usize,
    pub eval_cases: usize,
    pub spec: GameSpec,
    pub branched: TrainConfig,
    pub linear: TrainConfig,
    pub alpha: f64,
    /// Fraction of final training steps averaged for the curve comparison.
    pub tail_fraction: f64,
}

impl ComparisonConfig {
    pub fn new(n_seeds: u64) -> Self {
        Self {
            seeds: (0..n_seeds).collect(),
            train_cases: 200,
            eval_cases: 400,
            spec: GameSpec::default(),
            branched: TrainConfig::branched(),
            linear: TrainConfig::linear(),
            alpha: evalkit::DEFAULT_ALPHA,
            tail_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: TrainMode,
    pub eval: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub curve_tail_mean: f64,
    pub skipped_cases: usize,
    pub completions_per_case: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base: EvalReport,
    pub branched: ModeResult,
    pub linear: ModeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub per_seed: Vec<SeedResult>,
    /// Branched minus linear held-out percentage.
    pub accuracy_test: TTestResult,
    /// Linear minus branched mean broadness (positive: branched broader).
    pub broadness_test: TTestResult,
    /// Branched minus untrained held-out percentage.
    pub base_test: TTestResult,
    /// Fraction of seeds where the branched curve's tail mean is higher.
    pub curve_win_rate: f64,
    pub winner: String,
}

fn run_mode(
    env: &SimEnv,
    train: &[CaseRecord],
    eval: &[CaseRecord],
    config: &TrainConfig,
    seed: u64,
    tail_fraction: f64,
) -> Result<ModeResult> {
    let config = TrainConfig { seed, ..config.clone() };
    let run = train_on_bank(env, train, &config, Checkpoint::fresh(env, &config), None)?;
    let report = evaluate(env, &run.checkpoint.params, eval, seed)?;
    Ok(ModeResult {
        mode: config.mode,
        eval: report,
        curve_tail_mean: evalkit::tail_mean(&run.checkpoint.curve, tail_fraction).unwrap_or(f64::NAN),
        skipped_cases: run.skipped(),
        curve: run.checkpoint.curve,
        completions_per_case: config.forest.doctor_completions(),
    })
}

/// Trains both modes on identical per-seed banks and scores them on the
/// same held-out bank.
pub fn run_seed(cfg: &ComparisonConfig, seed: u64) -> Result<SeedResult> {
    let depth = cfg.branched.forest.depth;
    if cfg.linear.forest.depth != depth {
        return Err(TrainError::Config("both modes must use the same depth".into()).into());
    }
    let env = SimEnv::new(cfg.spec.clone(), depth)?;
    let train = cfg.spec.generate_case_bank(train_bank_seed(seed), cfg.train_cases)?;
    let eval = cfg.spec.generate_case_bank(eval_bank_seed(seed), cfg.eval_cases)?;
    let base = evaluate(&env, &env.new_policy(), &eval, seed)?;
    let branched = run_mode(&env, &train, &eval, &cfg.branched, seed, cfg.tail_fraction)?;
    let linear = run_mode(&env, &train, &eval, &cfg.linear, seed, cfg.tail_fraction)?;
    Ok(SeedResult { seed, base, branched, linear })
}

/// Runs every seed (in parallel) and the paired tests across seeds.
pub fn run_comparison(cfg: &ComparisonConfig) -> Result<ComparisonReport> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(1);
    let mut per_seed: Vec<Option<Result<SeedResult>>> = (0..cfg.seeds.len()).map(|_| None).collect();
    for chunk_start in (0..cfg.seeds.len()).step_by(workers) {
        let chunk_end = (chunk_start + workers).min(cfg.seeds.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> = (chunk_start..chunk_end)
                .map(|i| (i, scope.spawn(move || run_seed(cfg, cfg.seeds[i]))))
                .collect();
            for (i, h) in handles {
                per_seed[i] = Some(h.join().expect("seed worker panicked"));
            }
        });
    }
    let per_seed = per_seed.into_iter().map(|r| r.expect("every seed ran")).collect::<Result<Vec<_>>>()?;
    summarize(per_seed, cfg.alpha)
}

pub fn summarize(per_seed: Vec<SeedResult>, alpha: f64) -> Result<ComparisonReport> {
    let pick = |f: &dyn Fn(&SeedResult) -> f64| per_seed.iter().map(f).collect::<Vec<f64>>();
    let branched_acc = pick(&|s| s.branched.eval.percentage);
    let linear_acc = pick(&|s| s.linear.eval.percentage);
    let base_acc = pick(&|s| s.base.percentage);
    let branched_broad = pick(&|s| s.branched.eval.mean_broadness);
    let linear_broad = pick(&|s| s.linear.eval.mean_broadness);

    let accuracy_test = evalkit::paired_t_test(&branched_acc, &linear_acc, alpha)?;
    let broadness_test = evalkit::paired_t_test(&linear_broad, &branched_broad, alpha)?;
    let base_test = evalkit::paired_t_test(&branched_acc, &base_acc, alpha)?;
    let wins = per_seed
        .iter()
        .filter(|s| s.branched.curve_tail_mean > s.linear.curve_tail_mean)
        .count();
    let winner = if accuracy_test.significant {
        if accuracy_test.mean_difference > 0.0 { "branched" } else { "linear" }
    } else {
        "none"
    };
    Ok(ComparisonReport {
        curve_win_rate: wins as f64 / per_seed.len().max(1) as f64,
        per_seed,
        accuracy_test,
        broadness_test,
        base_test,
        winner: winner.to_string(),
    })
}
