//! Live transport: HTTP JSON chat completions.
//!
//! Request body: `{model, messages: [{role, content}], temperature, max_tokens}`.
//! Every targeted provider exposes this surface (or an adapter for it), so one
//! client boundary covers them all. Each role can point at its own base URL
//! and API key, which is how different providers serve different roles.

use std::time::Duration;

use serde::Deserialize;

use super::{Backend, LlmError, LlmRequest, LlmResponse, LlmRole, Usage};

/// Where one role's requests go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    /// Base URL up to but not including `/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
}

impl Endpoint {
    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Per-role endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleEndpoints {
    pub optimizer: Endpoint,
    pub executor: Endpoint,
    pub evaluator: Endpoint,
}

impl RoleEndpoints {
    pub fn uniform(endpoint: Endpoint) -> Self {
        Self {
            optimizer: endpoint.clone(),
            executor: endpoint.clone(),
            evaluator: endpoint,
        }
    }

    fn get(&self, role: LlmRole) -> &Endpoint {
        match role {
            LlmRole::Optimizer => &self.optimizer,
            LlmRole::Executor => &self.executor,
            LlmRole::Evaluator => &self.evaluator,
        }
    }
}

pub struct HttpBackend {
    endpoints: RoleEndpoints,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoints: RoleEndpoints) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            endpoints,
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Backend for HttpBackend {
    fn send(&self, model: &str, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let endpoint = self.endpoints.get(request.role);

        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &request.system_text {
            messages.push(serde_json::json!({"role": "system", "content": system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user_text}));
        let mut body = serde_json::json!({
            "model": model,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(max_tokens) = request.max_output_tokens {
            body["max_tokens"] = serde_json::json!(max_tokens);
        }

        let mut call = self.agent.post(endpoint.completions_url());
        if let Some(key) = &endpoint.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| LlmError::Transport {
            status: None,
            message: e.to_string(),
        })?;

        let status = resp.status().as_u16();
        if status == 429 {
            return Err(LlmError::RateLimited(format!(
                "HTTP 429 from {}",
                endpoint.completions_url()
            )));
        }
        if !(200..300).contains(&status) {
            let detail = resp
                .body_mut()
                .read_to_string()
                .unwrap_or_else(|_| String::from("<unreadable body>"));
            return Err(LlmError::Transport {
                status: Some(status),
                message: truncate(&detail, 500),
            });
        }

        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Transport {
                status: Some(status),
                message: format!("unparseable completion body: {e}"),
            })?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let usage = wire.usage.unwrap_or_default();
        // Pricing is keyed by the configured model name, so report that one
        // even when the provider echoes a dated variant.
        Ok(LlmResponse {
            text,
            usage: Usage::new(usage.prompt_tokens, usage.completion_tokens),
            model_id: model.to_string(),
            latency_ms: 0,
        })
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}
