//! The YAML run-configuration file: loop settings, per-role model settings,
//! and the pricing table.
//!
//! ```yaml
//! run:
//!   max_iterations: 10
//!   sample_count: 3
//!   eval_rounds: 4
//!   sampling_mode: resample_per_iteration
//!   seed: 42
//!   budget: {max_cost: 1.0, max_calls: 200}
//!   answer_format: {kind: xml_tag, tag: answer}
//! llm:
//!   base_url: https://api.openai.com/v1
//!   api_key_env: OPENAI_API_KEY
//!   optimizer: {model: gpt-4o-mini, temperature: 0.7}
//!   executor: {model: gpt-4o-mini, temperature: 0.0}
//!   evaluator: {model: gpt-4o-mini, temperature: 0.3}
//! pricing:
//!   gpt-4o-mini: {input_price_per_1k: 0.00015, output_price_per_1k: 0.0006}
//! ```
//!
//! Every section and field is optional; omitted fields take the defaults
//! above. `SPO_BASE_URL` overrides the global base URL; per-role `base_url`
//! and `api_key_env` let roles live on different providers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::http::{Endpoint, RoleEndpoints};
use crate::llm::{LlmRole, PriceTable, RoleConfig, RoleConfigs};
use crate::runner::RunConfig;

pub const BASE_URL_ENV: &str = "SPO_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
const DEFAULT_LIVE_MODEL: &str = "gpt-4o-mini";

/// Per-role overrides in the `llm:` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleSettings {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
}

/// The `llm:` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub optimizer: RoleSettings,
    pub executor: RoleSettings,
    pub evaluator: RoleSettings,
}

impl LlmSettings {
    fn role(&self, role: LlmRole) -> &RoleSettings {
        match role {
            LlmRole::Optimizer => &self.optimizer,
            LlmRole::Executor => &self.executor,
            LlmRole::Evaluator => &self.evaluator,
        }
    }
}

/// A parsed configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunConfig,
    pub llm: LlmSettings,
    pub pricing: PriceTable,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config file: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("environment variable {0} is not set (required for the live backend)")]
    MissingApiKey(String),
    #[error("no price configured for model `{0}`; add it to the `pricing:` section")]
    MissingPrice(String),
}

impl FileConfig {
    pub fn from_yaml(source: &str) -> Result<Self, ConfigError> {
        Ok(serde_yaml::from_str(source)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_yaml(&std::fs::read_to_string(path)?)
    }

    /// Per-role model configs. Scripted backends default every model to
    /// "scripted"; live backends default to a single small model.
    pub fn role_configs(&self, scripted: bool) -> RoleConfigs {
        let default_model = if scripted {
            "scripted"
        } else {
            DEFAULT_LIVE_MODEL
        };
        let mut configs = RoleConfigs::with_models(default_model, default_model, default_model);
        for role in LlmRole::ALL {
            let settings = self.llm.role(role);
            let config = match role {
                LlmRole::Optimizer => &mut configs.optimizer,
                LlmRole::Executor => &mut configs.executor,
                LlmRole::Evaluator => &mut configs.evaluator,
            };
            apply_role_settings(config, settings);
        }
        configs
    }

    /// Resolve live endpoints, reading API keys from the configured
    /// environment variables. `SPO_BASE_URL` overrides the global base URL.
    pub fn resolve_endpoints(&self) -> Result<RoleEndpoints, ConfigError> {
        let global_base = std::env::var(BASE_URL_ENV)
            .ok()
            .or_else(|| self.llm.base_url.clone());
        let resolve = |settings: &RoleSettings| -> Result<Endpoint, ConfigError> {
            let base_url = settings
                .base_url
                .clone()
                .or_else(|| global_base.clone())
                .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
            let key_env = settings
                .api_key_env
                .clone()
                .or_else(|| self.llm.api_key_env.clone())
                .unwrap_or_else(|| DEFAULT_API_KEY_ENV.to_string());
            let api_key =
                std::env::var(&key_env).map_err(|_| ConfigError::MissingApiKey(key_env.clone()))?;
            Ok(Endpoint {
                base_url,
                api_key: Some(api_key),
            })
        };
        Ok(RoleEndpoints {
            optimizer: resolve(&self.llm.optimizer)?,
            executor: resolve(&self.llm.executor)?,
            evaluator: resolve(&self.llm.evaluator)?,
        })
    }

    /// Live runs must have a price for every configured model, so accounting
    /// can never fail mid-run.
    pub fn validate_live_pricing(&self, roles: &RoleConfigs) -> Result<(), ConfigError> {
        for role in LlmRole::ALL {
            let model = &roles.get(role).model;
            if !self.pricing.contains(model) {
                return Err(ConfigError::MissingPrice(model.clone()));
            }
        }
        Ok(())
    }
}

fn apply_role_settings(config: &mut RoleConfig, settings: &RoleSettings) {
    if let Some(model) = &settings.model {
        config.model = model.clone();
    }
    if let Some(temperature) = settings.temperature {
        config.temperature = temperature;
    }
    if let Some(max_tokens) = settings.max_tokens {
        config.max_output_tokens = Some(max_tokens);
    }
}
