use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use scf_core::sim::GameSpec;
use scf_core::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Where the training cases came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BankSource {
    File { path: PathBuf },
    Generated { seed: u64, cases: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    #[serde(flatten)]
    pub source: BankSource,
    /// SHA-256 over the bank's canonical JSON lines.
    pub hash: String,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub curve_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: TrainConfig,
    pub spec: GameSpec,
    pub bank: BankInfo,
    pub completions_per_case: u64,
    pub steps_completed: u64,
    pub skipped_cases: usize,
    pub finished: bool,
    pub started_at: String,
    pub ended_at: Option<String>,
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn outputs_for(dir: &Path) -> Outputs {
    Outputs {
        curve_csv: dir.join(CURVE_FILE),
        checkpoint: dir.join(CHECKPOINT_FILE),
        manifest: dir.join(MANIFEST_FILE),
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
