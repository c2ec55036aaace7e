//! Evaluation instruments: diagnostic-accuracy percentage, n-gram tables,
//! Likert broadness aggregation, the paired t-test and reward-curve CSVs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no grades to score")]
    EmptyGrades,
    #[error("grade {0} is not one of 0.0, 0.5, 1.0")]
    OffScale(f64),
    #[error("Likert score {score} for question `{question}` is outside 1..=5")]
    LikertRange { question: String, score: u8 },
    #[error("question `{question}` rated twice by `{rater}`")]
    DuplicateRating { question: String, rater: String },
    #[error("question `{0}` has no ratings")]
    MissingQuestion(String),
    #[error("samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("steps must be strictly increasing (step {0} follows {1})")]
    NonMonotoneSteps(u64, u64),
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

pub const GRADE_SCALE: [f64; 3] = [1.0, 0.5, 0.0];
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Percentage of total possible points: 100 · Σ grades / count.
pub fn score_test_set(grades: &[f64]) -> Result<f64, EvalError> {
    if grades.is_empty() {
        return Err(EvalError::EmptyGrades);
    }
    if let Some(&g) = grades.iter().find(|g| !GRADE_SCALE.contains(g)) {
        return Err(EvalError::OffScale(g));
    }
    Ok(100.0 * grades.iter().sum::<f64>() / grades.len() as f64)
}

/// `49.2%` style, one decimal.
pub fn format_percentage(p: f64) -> String {
    format!("{p:.1}%")
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| !c.is_ascii_punctuation() && !matches!(c, '‘' | '’' | '“' | '”'))
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramCount {
    pub ngram: String,
    pub count: usize,
}

/// Counts word n-grams within each text and returns the `k` most frequent;
/// ties are broken lexicographically.
pub fn top_ngrams<S: AsRef<str>>(corpus: &[S], n: usize, k: usize) -> Vec<NgramCount> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        let tokens = tokenize(text.as_ref());
        for window in tokens.windows(n) {
            *counts.entry(window.join(" ")).or_default() += 1;
        }
    }
    let mut all: Vec<NgramCount> =
        counts.into_iter().map(|(ngram, count)| NgramCount { ngram, count }).collect();
    all.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.ngram.cmp(&b.ngram)));
    all.truncate(k);
    all
}

/// Numbered lines in the `1. 'what is the duration of' (12)` format.
pub fn format_ngram_table(rows: &[NgramCount]) -> String {
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{}. '{}' ({})", i + 1, r.ngram, r.count);
    }
    out
}

/// Two ranked n-gram lists side by side under their headers.
pub fn format_ngram_columns(left_title: &str, left: &[NgramCount], right_title: &str, right: &[NgramCount]) -> String {
    let cell = |rows: &[NgramCount], i: usize| {
        rows.get(i).map(|r| format!("{}. '{}' ({})", i + 1, r.ngram, r.count)).unwrap_or_default()
    };
    let width = (0..left.len())
        .map(|i| cell(left, i).chars().count())
        .chain([left_title.chars().count()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{left_title:<width$}  {right_title}\n");
    for i in 0..left.len().max(right.len()) {
        let _ = writeln!(out, "{:<width$}  {}", cell(left, i), cell(right, i));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadnessRating {
    pub question_id: String,
    pub rater_id: String,
    /// 1: needs several sentences ... 5: a yes/no answer.
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadnessSummary {
    pub per_question: BTreeMap<String, f64>,
    pub model_mean: f64,
}

/// Mean over raters per question, then mean over questions. Every id in
/// `questions` must have at least one rating.
pub fn broadness_aggregate(
    questions: &[String],
    ratings: &[BroadnessRating],
) -> Result<BroadnessSummary, EvalError> {
    let mut seen = BTreeSet::new();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in ratings {
        if !(1..=5).contains(&r.score) {
            return Err(EvalError::LikertRange { question: r.question_id.clone(), score: r.score });
        }
        if !seen.insert((r.question_id.as_str(), r.rater_id.as_str())) {
            return Err(EvalError::DuplicateRating {
                question: r.question_id.clone(),
                rater: r.rater_id.clone(),
            });
        }
        let e = sums.entry(&r.question_id).or_default();
        e.0 += f64::from(r.score);
        e.1 += 1;
    }
    let mut per_question = BTreeMap::new();
    for q in questions {
        let (sum, n) = sums.get(q.as_str()).ok_or_else(|| EvalError::MissingQuestion(q.clone()))?;
        per_question.insert(q.clone(), sum / *n as f64);
    }
    // rated questions not listed still count toward the model mean
    for (q, (sum, n)) in &sums {
        per_question.entry(q.to_string()).or_insert(sum / *n as f64);
    }
    if per_question.is_empty() {
        return Err(EvalError::MissingQuestion(String::new()));
    }
    let model_mean = per_question.values().sum::<f64>() / per_question.len() as f64;
    Ok(BroadnessSummary { per_question, model_mean })
}

/// Mean Likert score of a sequence of questions, each rated once.
pub fn mean_likert(scores: impl IntoIterator<Item = u8>) -> Option<f64> {
    let (sum, n) = scores
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + f64::from(x), n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value; `None` when every difference is identical.
    pub p: Option<f64>,
    pub mean_difference: f64,
    pub significant: bool,
}

impl TTestResult {
    pub fn is_degenerate(&self) -> bool {
        self.p.is_none()
    }
}

/// Student-t CDF with `df` degrees of freedom, through the regularized
/// incomplete beta function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided paired t-test on a − b with n − 1 degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;
    let sd = var.sqrt();
    if sd <= f64::EPSILON * mean.abs().max(1.0) {
        return Ok(TTestResult { t: 0.0, df, p: None, mean_difference: mean, significant: false });
    }
    let t = mean / (sd / nf.sqrt());
    // two-sided tail mass, taken straight from the incomplete beta to keep
    // precision when p is tiny
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTestResult { t, df, p: Some(p), mean_difference: mean, significant: p < alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mean_reward: f64,
}

pub const CURVE_HEADER: &str = "step,mean_reward";

/// Two-column CSV, header first, one row per step.
pub fn reward_curve_export(history: &[CurvePoint]) -> Result<String, EvalError> {
    let mut out = format!("{CURVE_HEADER}\n");
    for (i, p) in history.iter().enumerate() {
        if i > 0 && p.step <= history[i - 1].step {
            return Err(EvalError::NonMonotoneSteps(p.step, history[i - 1].step));
        }
        let _ = writeln!(out, "{},{}", p.step, p.mean_reward);
    }
    Ok(out)
}

pub fn parse_reward_curve(csv: &str) -> Result<Vec<CurvePoint>, EvalError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(EvalError::Csv { line: 1, reason: format!("expected header `{CURVE_HEADER}`") }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| EvalError::Csv { line: i + 1, reason: reason.to_string() };
        let (step, reward) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
        out.push(CurvePoint {
            step: step.trim().parse().map_err(|_| bad("bad step"))?,
            mean_reward: reward.trim().parse().map_err(|_| bad("bad reward"))?,
        });
    }
    Ok(out)
}

/// Mean reward over the final `fraction` of points (at least one point).
pub fn tail_mean(history: &[CurvePoint], fraction: f64) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let k = ((history.len() as f64 * fraction).ceil() as usize).clamp(1, history.len());
    let tail = &history[history.len() - k..];
    Some(tail.iter().map(|p| p.mean_reward).sum::<f64>() / k as f64)
}
