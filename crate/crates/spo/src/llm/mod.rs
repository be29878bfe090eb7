//! Provider-agnostic chat-completion client with per-role configuration.
//!
//! One wire protocol (HTTP JSON chat completions) covers every provider the
//! loop targets; provider differences stay behind the [`Backend`] trait. The
//! [`scripted::ScriptedBackend`] answers from canned per-role queues, which is
//! what every offline test runs against.
//!
//! The client is shareable across threads: the ledger sits behind a mutex and
//! backends are `Send + Sync`. The loop itself issues calls sequentially, so
//! scripted queue order is deterministic.

pub mod http;
pub mod ledger;
pub mod scripted;

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{
    Budget, CostLedger, LedgerSnapshot, ModelPrice, PriceTable, RoleTotals, Usage, UsageTotals,
};

/// Which of the three loop functions a call serves. Role selects the model,
/// temperature, and ledger bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmRole {
    Optimizer,
    Executor,
    Evaluator,
}

impl LlmRole {
    pub const ALL: [LlmRole; 3] = [LlmRole::Optimizer, LlmRole::Executor, LlmRole::Evaluator];

    pub fn as_str(self) -> &'static str {
        match self {
            LlmRole::Optimizer => "optimizer",
            LlmRole::Executor => "executor",
            LlmRole::Evaluator => "evaluator",
        }
    }
}

impl std::fmt::Display for LlmRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fully rendered request, ready for transport.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub role: LlmRole,
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A completion plus the usage the provider reported.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    pub usage: Usage,
    pub model_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        message: String,
    },
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("budget exceeded: {reason}")]
    BudgetExceeded { reason: String },
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("scripted backend has no {role} responses left")]
    ScriptExhausted { role: LlmRole },
    #[error("no price configured for model `{0}`")]
    UnknownModelPrice(String),
    #[error("retries exhausted after {attempts} attempts: {source}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        source: Box<LlmError>,
    },
}

impl LlmError {
    /// Transient errors worth retrying; everything else propagates at once.
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::RateLimited(_))
    }

    pub fn is_budget(&self) -> bool {
        matches!(self, LlmError::BudgetExceeded { .. })
    }
}

/// Transport abstraction: live HTTP or a scripted queue.
pub trait Backend: Send + Sync {
    fn send(&self, model: &str, request: &LlmRequest) -> Result<LlmResponse, LlmError>;

    /// Skip responses an earlier process already consumed; used when resuming
    /// a run against a scripted backend. Live backends have nothing to skip.
    fn fast_forward(&self, _role: LlmRole, _calls: u64) -> Result<(), LlmError> {
        Ok(())
    }

    fn name(&self) -> &'static str;
}

/// Model, temperature, and output cap for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

/// Per-role model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfigs {
    pub optimizer: RoleConfig,
    pub executor: RoleConfig,
    pub evaluator: RoleConfig,
}

impl RoleConfigs {
    pub fn get(&self, role: LlmRole) -> &RoleConfig {
        match role {
            LlmRole::Optimizer => &self.optimizer,
            LlmRole::Executor => &self.executor,
            LlmRole::Evaluator => &self.evaluator,
        }
    }

    /// Default temperatures: 0.7 for optimization, 0.3 for evaluation, 0 for
    /// execution.
    pub fn with_models(
        optimizer: impl Into<String>,
        executor: impl Into<String>,
        evaluator: impl Into<String>,
    ) -> Self {
        Self {
            optimizer: RoleConfig {
                model: optimizer.into(),
                temperature: 0.7,
                max_output_tokens: None,
            },
            executor: RoleConfig {
                model: executor.into(),
                temperature: 0.0,
                max_output_tokens: None,
            },
            evaluator: RoleConfig {
                model: evaluator.into(),
                temperature: 0.3,
                max_output_tokens: None,
            },
        }
    }

    pub fn scripted() -> Self {
        Self::with_models("scripted", "scripted", "scripted")
    }
}

/// Retry schedule for transient failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; used by tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff: Duration::ZERO,
        }
    }

    fn backoff_for(&self, completed_attempts: u32) -> Duration {
        if self.initial_backoff.is_zero() {
            return Duration::ZERO;
        }
        self.initial_backoff
            .saturating_mul(1u32 << (completed_attempts.saturating_sub(1)).min(16))
    }
}

/// Chat-completion client: role configuration, retry, budget, accounting.
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    roles: RoleConfigs,
    ledger: Mutex<CostLedger>,
    retry: RetryPolicy,
    log_requests: bool,
}

impl LlmClient {
    pub fn new(
        backend: Arc<dyn Backend>,
        roles: RoleConfigs,
        price_table: PriceTable,
        budget: Budget,
    ) -> Self {
        Self {
            backend,
            roles,
            ledger: Mutex::new(CostLedger::new(price_table, budget)),
            retry: RetryPolicy::default(),
            log_requests: false,
        }
    }

    /// Client over a scripted backend with zero-priced models, the default for
    /// offline runs. Explicit price entries (for cost tests) take precedence.
    pub fn over_script(
        backend: Arc<scripted::ScriptedBackend>,
        roles: RoleConfigs,
        mut price_table: PriceTable,
        budget: Budget,
    ) -> Self {
        for role in LlmRole::ALL {
            let model = &roles.get(role).model;
            if !price_table.contains(model) {
                price_table.insert(model.clone(), ModelPrice::default());
            }
        }
        Self::new(backend, roles, price_table, budget)
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_request_logging(mut self, on: bool) -> Self {
        self.log_requests = on;
        self
    }

    pub fn role_config(&self, role: LlmRole) -> &RoleConfig {
        self.roles.get(role)
    }

    pub fn roles(&self) -> &RoleConfigs {
        &self.roles
    }

    /// Build a request with the role's configured temperature and output cap.
    pub fn request(&self, role: LlmRole, user_text: impl Into<String>) -> LlmRequest {
        let cfg = self.roles.get(role);
        LlmRequest {
            role,
            system_text: None,
            user_text: user_text.into(),
            temperature: cfg.temperature,
            max_output_tokens: cfg.max_output_tokens,
        }
    }

    /// One transport attempt: validate, check budget, send, record.
    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        self.ledger.lock().unwrap().check_budget()?;

        let model = &self.roles.get(request.role).model;
        let started = Instant::now();
        if self.log_requests {
            log_request(model, request);
        }
        let outcome = self.backend.send(model, request).and_then(|mut resp| {
            resp.latency_ms = started.elapsed().as_millis() as u64;
            if resp.text.is_empty() {
                Err(LlmError::EmptyCompletion)
            } else {
                Ok(resp)
            }
        });
        match outcome {
            Ok(resp) => {
                if self.log_requests {
                    log_response(&resp);
                }
                self.ledger
                    .lock()
                    .unwrap()
                    .record_and_total(&resp, request.role)?;
                Ok(resp)
            }
            Err(err) => {
                self.ledger.lock().unwrap().record_failed_attempt();
                Err(err)
            }
        }
    }

    /// Retry transient failures with the client's default policy.
    pub fn complete_with_retry(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.complete_with_policy(request, &self.retry.clone())
    }

    /// Retry transient failures per `policy`; non-retryable errors propagate
    /// on first occurrence.
    pub fn complete_with_policy(
        &self,
        request: &LlmRequest,
        policy: &RetryPolicy,
    ) -> Result<LlmResponse, LlmError> {
        if policy.max_attempts == 0 {
            return Err(LlmError::InvalidRequest(
                "retry policy needs at least one attempt".into(),
            ));
        }
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.complete(request) {
                Ok(resp) => return Ok(resp),
                Err(err) if err.is_retryable() && attempts < policy.max_attempts => {
                    let delay = policy.backoff_for(attempts);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                Err(err) if err.is_retryable() => {
                    return Err(LlmError::RetriesExhausted {
                        attempts,
                        source: Box::new(err),
                    })
                }
                Err(err) => return Err(err),
            }
        }
    }

    pub fn ledger(&self) -> MutexGuard<'_, CostLedger> {
        self.ledger.lock().unwrap()
    }

    pub fn role_totals(&self) -> RoleTotals {
        *self.ledger().per_role()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.ledger().snapshot()
    }

    pub fn absorb_prior_usage(&self, prior: &RoleTotals) {
        self.ledger().absorb_prior(prior);
    }

    pub fn fast_forward(&self, role: LlmRole, calls: u64) -> Result<(), LlmError> {
        self.backend.fast_forward(role, calls)
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }
}

fn log_request(model: &str, request: &LlmRequest) {
    eprintln!(
        "llm >> role={} model={} temperature={}{}",
        request.role,
        model,
        request.temperature,
        request
            .max_output_tokens
            .map(|m| format!(" max_tokens={m}"))
            .unwrap_or_default()
    );
    if let Some(system) = &request.system_text {
        eprintln!("llm >> system:\n{system}");
    }
    eprintln!("llm >> user:\n{}", request.user_text);
}

fn log_response(resp: &LlmResponse) {
    eprintln!(
        "llm << model={} prompt_tokens={} completion_tokens={} latency_ms={}",
        resp.model_id, resp.usage.prompt_tokens, resp.usage.completion_tokens, resp.latency_ms
    );
    eprintln!("llm << text:\n{}", resp.text);
}
