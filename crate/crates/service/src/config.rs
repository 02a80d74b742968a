//! Session configuration stored as `session.json` in the workflow root.

use std::fs;
use std::path::{Path, PathBuf};

use peak_core::backend::TimingPolicy;
use peak_core::perf::{FlopsModel, Strategy};
use peak_core::transform::client::{ENV_MAX_IN_FLIGHT, ENV_MODEL, ENV_TOKEN, ENV_URL};
use peak_core::transform::LiveConfig;
use peak_core::validation::TolerancePolicies;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const CONFIG_FILE: &str = "session.json";

/// Which model client a session uses. Exactly one is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmSettings {
    /// Fixture directory holding `<transformation>/fixtures.json`, plus
    /// `TRANSFORMATION:VARIANT` fixture sets applied to every call.
    Mock {
        fixtures: PathBuf,
        #[serde(default)]
        variants: Vec<String>,
    },
    /// Chat-completion endpoint. The token is only read from the environment.
    Live { base_url: String, model: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub backend: String,
    pub llm: LlmSettings,
    /// Transformation catalog directory.
    pub catalog: PathBuf,
    #[serde(default = "default_budget")]
    pub validator_budget: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub timing: TimingPolicy,
    #[serde(default)]
    pub tolerances: TolerancePolicies,
    #[serde(default = "default_keep_top")]
    pub keep_top: usize,
    /// Strategy used by `run-sequence` and by API evaluations without one.
    #[serde(default = "default_strategy")]
    pub default_strategy: Strategy,
    #[serde(default)]
    pub flops_model: Option<FlopsModel>,
    /// Compiled-artifact cache; `<root>/build-cache` when unset.
    #[serde(default)]
    pub build_cache: Option<PathBuf>,
    #[serde(default)]
    pub validator_plugins: Vec<PathBuf>,
    #[serde(default)]
    pub tuner_plugins: Vec<PathBuf>,
    #[serde(default)]
    pub backend_manifests: Vec<PathBuf>,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_budget() -> usize {
    16
}

fn default_retries() -> u32 {
    3
}

fn default_keep_top() -> usize {
    128
}

fn default_strategy() -> Strategy {
    Strategy::Random { budget: 16, seed: 0 }
}

fn default_listen() -> String {
    "127.0.0.1:7878".into()
}

impl SessionConfig {
    pub fn new(backend: &str, llm: LlmSettings, catalog: PathBuf) -> Self {
        SessionConfig {
            backend: backend.to_owned(),
            llm,
            catalog,
            validator_budget: default_budget(),
            max_retries: default_retries(),
            timing: TimingPolicy::default(),
            tolerances: TolerancePolicies::default(),
            keep_top: default_keep_top(),
            default_strategy: default_strategy(),
            flops_model: None,
            build_cache: None,
            validator_plugins: Vec::new(),
            tuner_plugins: Vec::new(),
            backend_manifests: Vec::new(),
            listen: default_listen(),
            seed: 0,
        }
    }

    pub fn load(root: &Path) -> Result<Self, ServiceError> {
        let path = root.join(CONFIG_FILE);
        let raw = fs::read(&path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let config: SessionConfig =
            serde_json::from_slice(&raw).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        config.check()?;
        Ok(config)
    }

    pub fn save(&self, root: &Path) -> Result<(), ServiceError> {
        fs::write(root.join(CONFIG_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn check(&self) -> Result<(), ServiceError> {
        if self.validator_budget == 0 {
            return Err(ServiceError::Config("validator_budget must be positive".into()));
        }
        if self.keep_top == 0 {
            return Err(ServiceError::Config("keep_top must be positive".into()));
        }
        Ok(())
    }

    /// Live client settings. `PEAK_LLM_URL` and `PEAK_LLM_MODEL` override
    /// the stored endpoint; the token and concurrency limit come only from
    /// the environment.
    pub fn live_config(&self) -> Result<Option<LiveConfig>, ServiceError> {
        let LlmSettings::Live { base_url, model } = &self.llm else { return Ok(None) };
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let max_in_flight = match var(ENV_MAX_IN_FLIGHT) {
            Some(v) => v
                .parse()
                .ok()
                .filter(|n: &usize| *n > 0)
                .ok_or_else(|| ServiceError::Config(format!("{ENV_MAX_IN_FLIGHT} must be a positive integer")))?,
            None => 4,
        };
        Ok(Some(LiveConfig {
            base_url: var(ENV_URL).unwrap_or_else(|| base_url.clone()),
            model: var(ENV_MODEL).unwrap_or_else(|| model.clone()),
            token: var(ENV_TOKEN),
            max_in_flight,
            timeout: std::time::Duration::from_secs(600),
            audit_dir: None,
        }))
    }
}
