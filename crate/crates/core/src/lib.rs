//! Branched conversation-forest training for multi-turn interviews.
//!
//! - [`forest`]: the conversation forest and its advantage math.
//! - [`policy`] / [`trainer`]: the tabular doctor policy and its clipped
//!   policy-gradient trainer with AdamW.
//! - [`sim`]: a seedable diagnostic-interview game playing the patient,
//!   diagnostician and grader roles.
//! - [`casebank`]: case records and their JSON-lines bank format.
//! - [`evalkit`]: accuracy, n-gram, broadness and significance instruments.
//! - [`experiment`]: training runs and the branched-vs-linear comparison.

pub mod casebank;
pub mod evalkit;
pub mod experiment;
pub mod forest;
pub mod policy;
pub mod sim;
pub mod trainer;

pub use casebank::CaseRecord;
pub use forest::{AdvantageTable, Forest, ForestConfig, NodeId, Role};
pub use policy::{ActionId, PolicyParams, StateId};
pub use trainer::{TrainConfig, TrainMode};
