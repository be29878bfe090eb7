//! Propose a revised prompt from the incumbent and its execution results.
//!
//! The optimization meta-prompt (see `assets/optimize_prompt.txt`) shows the
//! model the task requirements, the incumbent prompt, and its outputs on the
//! sampled questions, and asks for an XML-tagged reply:
//! `<analyse>…</analyse><modification>…</modification><prompt>…</prompt>`.
//! Only the question/output pairs are shown, never gold answers or hints, so
//! the proposal step stays reference-free.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{AnswerFormat, ExecutionBatch};
use crate::llm::{LlmClient, LlmError, LlmRole};

/// Default optimization meta-prompt, with `{requirements}`, `{prompt}`, and
/// `{answers}` placeholders.
pub const OPTIMIZE_TEMPLATE: &str = include_str!("assets/optimize_prompt.txt");

/// How many times a malformed optimizer reply is re-asked (with an identical
/// request) before the iteration is marked failed.
pub const PARSE_RETRY_BUDGET: u32 = 1;

/// One prompt version with its optimizer metadata and lineage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub text: String,
    /// 0 for the seed prompt.
    pub iteration: u64,
    /// Iteration of the incumbent this candidate was derived from.
    pub parent_iteration: Option<u64>,
    pub analysis: Option<String>,
    pub modification: Option<String>,
}

impl PromptCandidate {
    /// The initial prompt: iteration 0, no lineage or optimizer metadata.
    pub fn seed(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            iteration: 0,
            parent_iteration: None,
            analysis: None,
            modification: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("response is missing a complete <{0}> tag")]
    MissingTag(&'static str),
}

#[derive(Debug, Error)]
pub enum ProposeError {
    #[error("no usable proposal after {attempts} attempts: {source}")]
    ProposeFailed {
        attempts: u32,
        #[source]
        source: ParseError,
    },
    #[error("proposed prompt duplicates the incumbent (whitespace-normalized match)")]
    DuplicatePrompt,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Fields parsed out of an optimizer reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedProposal {
    pub analysis: String,
    pub modification: String,
    pub prompt: String,
    /// Optional tags that were absent; absence degrades to empty fields.
    pub missing_optional_tags: Vec<&'static str>,
}

/// Substitute each placeholder occurrence exactly once, scanning left to
/// right. Substituted values are never rescanned, so prompt or requirement
/// text containing a placeholder token cannot inject into the template.
pub(crate) fn substitute_template(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = substitutions
            .iter()
            .filter_map(|(key, value)| rest.find(key).map(|at| (at, *key, *value)))
            .min_by_key(|(at, key, _)| (*at, std::cmp::Reverse(key.len())));
        match next {
            Some((at, key, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + key.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

/// Content of the first complete `<tag>…</tag>` region; surrounding prose is
/// ignored and inner text is taken verbatim.
pub(crate) fn first_tag_content<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let end = raw[start..].find(&close)?;
    Some(&raw[start..start + end])
}

/// Render the optimization meta-prompt. `{answers}` becomes the batch's
/// numbered question/output blocks; extracted final answers are appended only
/// when a non-raw answer format is configured.
pub fn render_optimize_prompt(
    best: &PromptCandidate,
    answers: &ExecutionBatch,
    requirements: &str,
    template: &str,
    answer_format: Option<&AnswerFormat>,
) -> String {
    let include_extracted = matches!(answer_format, Some(f) if *f != AnswerFormat::Raw);
    let answers_block = answers.render_numbered(include_extracted);
    substitute_template(
        template,
        &[
            ("{requirements}", requirements),
            ("{prompt}", &best.text),
            ("{answers}", &answers_block),
        ],
    )
}

/// Parse an optimizer reply. `<prompt>` is mandatory and must have content
/// (a whitespace-only tag counts as absent); a missing `<analyse>` or
/// `<modification>` degrades to an empty field and is reported in
/// `missing_optional_tags`.
pub fn parse_optimize_response(raw: &str) -> Result<ParsedProposal, ParseError> {
    let prompt = first_tag_content(raw, "prompt")
        .filter(|p| !p.trim().is_empty())
        .ok_or(ParseError::MissingTag("prompt"))?;
    let mut missing = Vec::new();
    let analysis = first_tag_content(raw, "analyse").unwrap_or_else(|| {
        missing.push("analyse");
        ""
    });
    let modification = first_tag_content(raw, "modification").unwrap_or_else(|| {
        missing.push("modification");
        ""
    });
    Ok(ParsedProposal {
        analysis: analysis.trim().to_string(),
        modification: modification.trim().to_string(),
        prompt: prompt.trim().to_string(),
        missing_optional_tags: missing,
    })
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One optimizer-role call (plus up to [`PARSE_RETRY_BUDGET`] re-asks on
/// malformed replies) yielding the next candidate. A proposal whose text
/// matches the incumbent after whitespace normalization is rejected as
/// [`ProposeError::DuplicatePrompt`].
pub fn propose(
    best: &PromptCandidate,
    answers: &ExecutionBatch,
    requirements: &str,
    iteration: u64,
    template: &str,
    answer_format: Option<&AnswerFormat>,
    client: &LlmClient,
) -> Result<PromptCandidate, ProposeError> {
    let rendered = render_optimize_prompt(best, answers, requirements, template, answer_format);
    let request = client.request(LlmRole::Optimizer, rendered);
    let mut attempts = 0;
    let parsed = loop {
        attempts += 1;
        let response = client.complete_with_retry(&request)?;
        match parse_optimize_response(&response.text) {
            Ok(parsed) => break parsed,
            Err(_) if attempts <= PARSE_RETRY_BUDGET => continue,
            Err(source) => return Err(ProposeError::ProposeFailed { attempts, source }),
        }
    };
    if normalize_whitespace(&parsed.prompt) == normalize_whitespace(&best.text) {
        return Err(ProposeError::DuplicatePrompt);
    }
    Ok(PromptCandidate {
        text: parsed.prompt,
        iteration,
        parent_iteration: Some(best.iteration),
        analysis: (!parsed.analysis.is_empty()).then_some(parsed.analysis),
        modification: (!parsed.modification.is_empty()).then_some(parsed.modification),
    })
}
