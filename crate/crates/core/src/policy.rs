//! Tabular softmax policy over observable interview states.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ActionId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub usize);

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown state signature {0} (table has {1} states)")]
    UnknownState(usize, usize),
    #[error("action {0} out of range (table has {1} actions)")]
    UnknownAction(ActionId, usize),
    #[error("shape mismatch: expected {expected} entries, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
}

/// Action logits for every enumerated state, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    state_count: usize,
    action_count: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(state_count: usize, action_count: usize) -> Self {
        Self { state_count, action_count, logits: vec![0.0; state_count * action_count] }
    }

    pub fn from_logits(
        state_count: usize,
        action_count: usize,
        logits: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let expected = state_count * action_count;
        if logits.len() != expected {
            return Err(PolicyError::Shape { expected, found: logits.len() });
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self { state_count, action_count, logits })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn check_state(&self, state: StateId) -> Result<(), PolicyError> {
        if state.0 >= self.state_count {
            return Err(PolicyError::UnknownState(state.0, self.state_count));
        }
        Ok(())
    }

    pub fn offset(&self, state: StateId, action: ActionId) -> Result<usize, PolicyError> {
        self.check_state(state)?;
        if action >= self.action_count {
            return Err(PolicyError::UnknownAction(action, self.action_count));
        }
        Ok(state.0 * self.action_count + action)
    }

    pub fn logits(&self, state: StateId) -> Result<&[f64], PolicyError> {
        self.check_state(state)?;
        let start = state.0 * self.action_count;
        Ok(&self.logits[start..start + self.action_count])
    }

    pub fn logits_mut(&mut self, state: StateId) -> Result<&mut [f64], PolicyError> {
        self.check_state(state)?;
        let start = state.0 * self.action_count;
        Ok(&mut self.logits[start..start + self.action_count])
    }

    /// Action probabilities at `state`.
    pub fn probs(&self, state: StateId) -> Result<Vec<f64>, PolicyError> {
        Ok(softmax(self.logits(state)?))
    }

    /// log softmax(logits[state])[action].
    pub fn logprob(&self, state: StateId, action: ActionId) -> Result<f64, PolicyError> {
        let row = self.logits(state)?;
        if action >= self.action_count {
            return Err(PolicyError::UnknownAction(action, self.action_count));
        }
        Ok(row[action] - log_sum_exp(row))
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: StateId, rng: &mut R) -> Result<ActionId, PolicyError> {
        let probs = self.probs(state)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(a);
            }
        }
        Ok(self.action_count - 1)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
