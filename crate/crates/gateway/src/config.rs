//! Role endpoint settings and their TOML file format.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{GatewayError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Doctor,
    Patient,
    Diagnostician,
    Grader,
}

impl RoleKind {
    pub const ALL: [RoleKind; 4] =
        [RoleKind::Doctor, RoleKind::Patient, RoleKind::Diagnostician, RoleKind::Grader];

    /// Placeholders a template for this role may use. The doctor only ever
    /// sees the case introduction.
    pub fn allowed_placeholders(self) -> &'static [&'static str] {
        match self {
            RoleKind::Doctor => &["intro"],
            RoleKind::Patient => &["intro", "facts", "diagnosis"],
            RoleKind::Diagnostician => &["intro"],
            RoleKind::Grader => &["scale"],
        }
    }

    /// Doctors sample at 1.0 so sibling branches diverge; the other roles
    /// answer greedily.
    pub fn default_temperature(self) -> f64 {
        match self {
            RoleKind::Doctor => 1.0,
            _ => 0.0,
        }
    }

    pub fn default_template(self) -> &'static str {
        match self {
            RoleKind::Doctor => {
                "You are a physician interviewing a patient. The patient presents as: {intro}\n\
                 Ask exactly one question per turn. Do not state a diagnosis."
            }
            RoleKind::Patient => {
                "You are a patient in a medical interview. Your presentation: {intro}\n\
                 Your clinical details:\n{facts}\n\
                 Your underlying condition is {diagnosis}; never name it. Answer only what \
                 the doctor asks, briefly and in plain language."
            }
            RoleKind::Diagnostician => {
                "You are a diagnostician. The patient presented as: {intro}\n\
                 Read the interview and reply with the single most likely diagnosis and \
                 nothing else."
            }
            RoleKind::Grader => {
                "You grade a predicted diagnosis against the correct one. Use this scale:\n\
                 {scale}\nReply with the score only."
            }
        }
    }
}

impl fmt::Display for RoleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RoleKind::Doctor => "doctor",
            RoleKind::Patient => "patient",
            RoleKind::Diagnostician => "diagnostician",
            RoleKind::Grader => "grader",
        };
        f.write_str(s)
    }
}

fn default_max_tokens() -> u32 {
    20
}

fn default_template_version() -> String {
    "v1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub role: RoleKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    pub system_prompt: String,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_template_version")]
    pub template_version: String,
}

impl RoleConfig {
    /// A config with the built-in template and the role's default temperature.
    pub fn new(role: RoleKind, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            role,
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: role.default_temperature(),
            max_tokens: default_max_tokens(),
            system_prompt: role.default_template().into(),
            api_key_env: None,
            template_version: default_template_version(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(GatewayError::Config(format!("{}: max_tokens must be at least 1", self.role)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Config(format!(
                "{}: temperature must be a finite value >= 0, got {}",
                self.role, self.temperature
            )));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(GatewayError::Config(format!(
                "{}: endpoint `{}` is not an http(s) URL",
                self.role, self.endpoint
            )));
        }
        crate::prompt::check_template(self.role, &self.system_prompt)
    }
}

/// Partial role settings as written in the config file; omitted fields fall
/// back to the role defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoleSection {
    endpoint: Option<String>,
    model: Option<String>,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    system_prompt: Option<String>,
    api_key_env: Option<String>,
    template_version: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    endpoint: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    parallelism: Option<usize>,
    max_retries: Option<u32>,
    backoff_ms: Option<u64>,
    #[serde(default)]
    doctor: RoleSection,
    #[serde(default)]
    patient: RoleSection,
    #[serde(default)]
    diagnostician: RoleSection,
    #[serde(default)]
    grader: RoleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatewayConfig {
    pub doctor: RoleConfig,
    pub patient: RoleConfig,
    pub diagnostician: RoleConfig,
    pub grader: RoleConfig,
    /// Concurrent requests allowed within one forest level.
    pub parallelism: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl GatewayConfig {
    /// Every role pointed at one endpoint and model with default settings.
    pub fn uniform(endpoint: &str, model: &str) -> Self {
        Self {
            doctor: RoleConfig::new(RoleKind::Doctor, endpoint, model),
            patient: RoleConfig::new(RoleKind::Patient, endpoint, model),
            diagnostician: RoleConfig::new(RoleKind::Diagnostician, endpoint, model),
            grader: RoleConfig::new(RoleKind::Grader, endpoint, model),
            parallelism: 4,
            max_retries: 4,
            backoff_ms: 500,
        }
    }

    pub fn role(&self, role: RoleKind) -> &RoleConfig {
        match role {
            RoleKind::Doctor => &self.doctor,
            RoleKind::Patient => &self.patient,
            RoleKind::Diagnostician => &self.diagnostician,
            RoleKind::Grader => &self.grader,
        }
    }

    /// Parses the TOML format. Top-level `endpoint`, `model` and
    /// `api_key_env` apply to every role unless a `[doctor]`, `[patient]`,
    /// `[diagnostician]` or `[grader]` table overrides them.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        let build = |role: RoleKind, section: &RoleSection| -> Result<RoleConfig> {
            let endpoint = section
                .endpoint
                .clone()
                .or_else(|| file.endpoint.clone())
                .ok_or_else(|| GatewayError::Config(format!("{role}: no endpoint configured")))?;
            let model = section
                .model
                .clone()
                .or_else(|| file.model.clone())
                .ok_or_else(|| GatewayError::Config(format!("{role}: no model configured")))?;
            let mut cfg = RoleConfig::new(role, endpoint, model);
            if let Some(t) = section.temperature {
                cfg.temperature = t;
            }
            if let Some(m) = section.max_tokens {
                cfg.max_tokens = m;
            }
            if let Some(p) = &section.system_prompt {
                cfg.system_prompt = p.clone();
            }
            cfg.api_key_env = section.api_key_env.clone().or_else(|| file.api_key_env.clone());
            if let Some(v) = &section.template_version {
                cfg.template_version = v.clone();
            }
            cfg.validate()?;
            Ok(cfg)
        };
        let parallelism = file.parallelism.unwrap_or(4);
        if parallelism == 0 {
            return Err(GatewayError::Config("parallelism must be at least 1".into()));
        }
        Ok(Self {
            doctor: build(RoleKind::Doctor, &file.doctor)?,
            patient: build(RoleKind::Patient, &file.patient)?,
            diagnostician: build(RoleKind::Diagnostician, &file.diagnostician)?,
            grader: build(RoleKind::Grader, &file.grader)?,
            parallelism,
            max_retries: file.max_retries.unwrap_or(4),
            backoff_ms: file.backoff_ms.unwrap_or(500),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}
