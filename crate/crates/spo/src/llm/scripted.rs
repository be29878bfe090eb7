//! Deterministic scripted backend for offline runs and tests.
//!
//! Responses are matched to requests by a FIFO queue per role. Substring
//! triggers can override the queue for specific request contents. Identical
//! scripts with identical request sequences produce byte-identical response
//! sequences.
//!
//! Trigger overrides do not consume queue entries, so a run that should later
//! be resumable (replay via [`fast_forward`](super::Backend::fast_forward))
//! must stick to plain FIFO scripts.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{Backend, LlmError, LlmRequest, LlmResponse, LlmRole, Usage};

/// Errors a script can inject to exercise failure paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    RateLimited,
    Transport,
    BudgetExceeded,
}

impl ScriptedError {
    fn to_error(self) -> LlmError {
        match self {
            ScriptedError::RateLimited => LlmError::RateLimited("scripted".into()),
            ScriptedError::Transport => LlmError::Transport {
                status: None,
                message: "scripted".into(),
            },
            ScriptedError::BudgetExceeded => LlmError::BudgetExceeded {
                reason: "scripted".into(),
            },
        }
    }
}

/// One queue entry: a canned completion or an injected failure.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptItem {
    Response { text: String, usage: Usage },
    Fail(ScriptedError),
}

impl ScriptItem {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptItem::Response {
            text: text.into(),
            usage: Usage::default(),
        }
    }

    pub fn with_usage(text: impl Into<String>, prompt_tokens: u64, completion_tokens: u64) -> Self {
        ScriptItem::Response {
            text: text.into(),
            usage: Usage::new(prompt_tokens, completion_tokens),
        }
    }

    pub fn fail(error: ScriptedError) -> Self {
        ScriptItem::Fail(error)
    }
}

/// Override entry: when a request's user text contains `contains` (and the
/// role matches, if given), answer with `text` instead of popping the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub role: Option<LlmRole>,
    pub contains: String,
    pub text: String,
    pub usage: Usage,
}

/// Canned responses for all three roles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Script {
    pub optimizer: Vec<ScriptItem>,
    pub executor: Vec<ScriptItem>,
    pub evaluator: Vec<ScriptItem>,
    pub triggers: Vec<Trigger>,
}

impl Script {
    pub fn from_yaml(source: &str) -> Result<Self, ScriptFileError> {
        let raw: RawScript = serde_yaml::from_str(source)?;
        raw.try_into()
    }

    pub fn from_path(path: &Path) -> Result<Self, ScriptFileError> {
        let source = std::fs::read_to_string(path)?;
        Self::from_yaml(&source)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptFileError {
    #[error("cannot read script file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed script file: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("script item {index} for {role} must have exactly one of `text` or `error`")]
    AmbiguousItem { role: &'static str, index: usize },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default)]
    optimizer: Vec<RawItem>,
    #[serde(default)]
    executor: Vec<RawItem>,
    #[serde(default)]
    evaluator: Vec<RawItem>,
    #[serde(default)]
    triggers: Vec<RawTrigger>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    error: Option<ScriptedError>,
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrigger {
    #[serde(default)]
    role: Option<LlmRole>,
    contains: String,
    text: String,
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl TryFrom<RawScript> for Script {
    type Error = ScriptFileError;

    fn try_from(raw: RawScript) -> Result<Self, ScriptFileError> {
        fn convert(
            items: Vec<RawItem>,
            role: &'static str,
        ) -> Result<Vec<ScriptItem>, ScriptFileError> {
            items
                .into_iter()
                .enumerate()
                .map(|(index, item)| match (item.text, item.error) {
                    (Some(text), None) => Ok(ScriptItem::Response {
                        text,
                        usage: Usage::new(item.prompt_tokens, item.completion_tokens),
                    }),
                    (None, Some(error)) => Ok(ScriptItem::Fail(error)),
                    _ => Err(ScriptFileError::AmbiguousItem { role, index }),
                })
                .collect()
        }
        Ok(Script {
            optimizer: convert(raw.optimizer, "optimizer")?,
            executor: convert(raw.executor, "executor")?,
            evaluator: convert(raw.evaluator, "evaluator")?,
            triggers: raw
                .triggers
                .into_iter()
                .map(|t| Trigger {
                    role: t.role,
                    contains: t.contains,
                    text: t.text,
                    usage: Usage::new(t.prompt_tokens, t.completion_tokens),
                })
                .collect(),
        })
    }
}

/// A request as the backend saw it; tests assert over these.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub role: LlmRole,
    pub model: String,
    pub system_text: Option<String>,
    pub user_text: String,
}

/// FIFO-per-role mock transport.
pub struct ScriptedBackend {
    queues: Mutex<[VecDeque<ScriptItem>; 3]>,
    triggers: Vec<Trigger>,
    requests: Mutex<Vec<RecordedRequest>>,
}

fn slot(role: LlmRole) -> usize {
    match role {
        LlmRole::Optimizer => 0,
        LlmRole::Executor => 1,
        LlmRole::Evaluator => 2,
    }
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            queues: Mutex::new([
                script.optimizer.into(),
                script.executor.into(),
                script.evaluator.into(),
            ]),
            triggers: script.triggers,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn recorded_requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn remaining(&self, role: LlmRole) -> usize {
        self.queues.lock().unwrap()[slot(role)].len()
    }
}

impl Backend for ScriptedBackend {
    fn send(&self, model: &str, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.requests.lock().unwrap().push(RecordedRequest {
            role: request.role,
            model: model.to_string(),
            system_text: request.system_text.clone(),
            user_text: request.user_text.clone(),
        });

        for trigger in &self.triggers {
            let role_matches = trigger.role.is_none_or(|r| r == request.role);
            if role_matches && request.user_text.contains(&trigger.contains) {
                return Ok(LlmResponse {
                    text: trigger.text.clone(),
                    usage: trigger.usage,
                    model_id: model.to_string(),
                    latency_ms: 0,
                });
            }
        }

        let item = self.queues.lock().unwrap()[slot(request.role)]
            .pop_front()
            .ok_or(LlmError::ScriptExhausted { role: request.role })?;
        match item {
            ScriptItem::Response { text, usage } => Ok(LlmResponse {
                text,
                usage,
                model_id: model.to_string(),
                latency_ms: 0,
            }),
            ScriptItem::Fail(error) => Err(error.to_error()),
        }
    }

    fn fast_forward(&self, role: LlmRole, calls: u64) -> Result<(), LlmError> {
        let mut queues = self.queues.lock().unwrap();
        for _ in 0..calls {
            queues[slot(role)]
                .pop_front()
                .ok_or(LlmError::ScriptExhausted { role })?;
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(role: LlmRole, user_text: &str) -> LlmRequest {
        LlmRequest {
            role,
            system_text: None,
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: None,
        }
    }

    #[test]
    fn queues_are_per_role() {
        let backend = ScriptedBackend::new(Script {
            optimizer: vec![ScriptItem::text("opt")],
            executor: vec![ScriptItem::text("exe")],
            evaluator: vec![ScriptItem::text("eval")],
            triggers: vec![],
        });
        assert_eq!(
            backend
                .send("m", &request(LlmRole::Evaluator, "q"))
                .unwrap()
                .text,
            "eval"
        );
        assert_eq!(
            backend
                .send("m", &request(LlmRole::Optimizer, "q"))
                .unwrap()
                .text,
            "opt"
        );
        assert_eq!(
            backend
                .send("m", &request(LlmRole::Executor, "q"))
                .unwrap()
                .text,
            "exe"
        );
    }

    #[test]
    fn trigger_overrides_queue_without_consuming() {
        let backend = ScriptedBackend::new(Script {
            executor: vec![ScriptItem::text("queued")],
            triggers: vec![Trigger {
                role: Some(LlmRole::Executor),
                contains: "magic".into(),
                text: "triggered".into(),
                usage: Usage::default(),
            }],
            ..Default::default()
        });
        let hit = backend.send("m", &request(LlmRole::Executor, "say the magic word"));
        assert_eq!(hit.unwrap().text, "triggered");
        assert_eq!(backend.remaining(LlmRole::Executor), 1);
        let miss = backend.send("m", &request(LlmRole::Executor, "plain"));
        assert_eq!(miss.unwrap().text, "queued");
    }

    #[test]
    fn deterministic_across_instances() {
        let script = Script {
            executor: vec![ScriptItem::with_usage("one", 3, 5), ScriptItem::text("two")],
            ..Default::default()
        };
        let run = |script: Script| {
            let backend = ScriptedBackend::new(script);
            (0..2)
                .map(|i| {
                    backend
                        .send("m", &request(LlmRole::Executor, &format!("q{i}")))
                        .unwrap()
                })
                .map(|r| (r.text, r.usage))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(script.clone()), run(script));
    }

    #[test]
    fn fast_forward_skips_consumed_prefix() {
        let backend = ScriptedBackend::new(Script {
            executor: vec![
                ScriptItem::text("one"),
                ScriptItem::text("two"),
                ScriptItem::text("three"),
            ],
            ..Default::default()
        });
        backend.fast_forward(LlmRole::Executor, 2).unwrap();
        assert_eq!(
            backend
                .send("m", &request(LlmRole::Executor, "q"))
                .unwrap()
                .text,
            "three"
        );
    }

    #[test]
    fn yaml_script_parses() {
        let script = Script::from_yaml(
            "optimizer:\n  - text: hi\n    prompt_tokens: 10\n    completion_tokens: 20\nexecutor:\n  - error: rate_limited\ntriggers:\n  - role: evaluator\n    contains: foo\n    text: bar\n",
        )
        .unwrap();
        assert_eq!(script.optimizer, vec![ScriptItem::with_usage("hi", 10, 20)]);
        assert_eq!(
            script.executor,
            vec![ScriptItem::fail(ScriptedError::RateLimited)]
        );
        assert_eq!(script.triggers.len(), 1);
    }

    #[test]
    fn yaml_item_with_both_text_and_error_rejected() {
        let err =
            Script::from_yaml("optimizer:\n  - text: hi\n    error: transport\n").unwrap_err();
        assert!(matches!(
            err,
            ScriptFileError::AmbiguousItem {
                role: "optimizer",
                index: 0
            }
        ));
    }
}
