//! Run a prompt candidate over sampled questions and pull out final answers.
//!
//! Execution composes `prompt`, a blank line, and the question into one user
//! message (or sends the prompt as the system message when configured), calls
//! the executor role once per question, and stores outputs verbatim in input
//! order.
//!
//! Extraction takes the LAST delimiter occurrence: optimized prompts tell the
//! model to conclude with the answer, and chain-of-thought text may contain
//! earlier spurious tags.

use serde::{Deserialize, Serialize};

use crate::llm::{LlmClient, LlmError, LlmRole};
use crate::optimizer::PromptCandidate;

/// How final answers are delimited in executor output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerFormat {
    /// `<tag>…</tag>`, e.g. `<answer>Yes</answer>`.
    XmlTag { tag: String },
    /// `\boxed{…}` with balanced braces.
    #[serde(rename = "boxed")]
    BoxedMath,
    /// The whole output, trimmed.
    Raw,
}

/// One executed question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub question: String,
    pub raw_output: String,
    pub extracted: Option<String>,
}

/// Ordered outputs one prompt produced for one question sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionBatch {
    /// Iteration of the candidate that produced this batch.
    pub prompt_iteration: u64,
    pub items: Vec<BatchItem>,
}

impl ExecutionBatch {
    pub fn questions(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.question.as_str())
    }

    /// Numbered "Question i / Answer i" blocks, the shape both meta-prompts
    /// embed. With `include_extracted`, a supplementary line carries the
    /// extracted final answer when one was found.
    pub fn render_numbered(&self, include_extracted: bool) -> String {
        let mut out = String::new();
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            let n = i + 1;
            out.push_str(&format!("Question {n}: {}\n", item.question));
            out.push_str(&format!("Answer {n}: {}", item.raw_output));
            if include_extracted {
                if let Some(extracted) = &item.extracted {
                    out.push_str(&format!("\nExtracted final answer {n}: {extracted}"));
                }
            }
        }
        out
    }
}

/// Execute `candidate` on every question, in order. One executor-role call per
/// question; any failed call fails the whole batch.
pub fn execute(
    candidate: &PromptCandidate,
    questions: &[String],
    format: Option<&AnswerFormat>,
    prompt_as_system: bool,
    client: &LlmClient,
) -> Result<ExecutionBatch, LlmError> {
    if questions.is_empty() {
        return Err(LlmError::InvalidRequest(
            "cannot execute on an empty question list".into(),
        ));
    }
    let mut items = Vec::with_capacity(questions.len());
    for question in questions {
        let request = if prompt_as_system {
            let mut r = client.request(LlmRole::Executor, question.clone());
            r.system_text = Some(candidate.text.clone());
            r
        } else {
            client.request(
                LlmRole::Executor,
                format!("{}\n\n{}", candidate.text, question),
            )
        };
        let response = client.complete_with_retry(&request)?;
        let extracted = format.and_then(|f| extract_answer(&response.text, f));
        items.push(BatchItem {
            question: question.clone(),
            raw_output: response.text,
            extracted,
        });
    }
    Ok(ExecutionBatch {
        prompt_iteration: candidate.iteration,
        items,
    })
}

/// Pull the final answer out of `raw` per `format`. Absence is a value, not an
/// error.
pub fn extract_answer(raw: &str, format: &AnswerFormat) -> Option<String> {
    match format {
        AnswerFormat::XmlTag { tag } => last_tag_content(raw, tag).map(|s| s.trim().to_string()),
        AnswerFormat::BoxedMath => last_boxed_content(raw).map(|s| s.trim().to_string()),
        AnswerFormat::Raw => Some(raw.trim().to_string()),
    }
}

/// Content of the last complete `<tag>…</tag>` region, scanning
/// non-overlapping occurrences left to right.
fn last_tag_content<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut cursor = 0;
    let mut found = None;
    while let Some(start) = raw[cursor..].find(&open) {
        let content_start = cursor + start + open.len();
        match raw[content_start..].find(&close) {
            Some(end) => {
                found = Some(&raw[content_start..content_start + end]);
                cursor = content_start + end + close.len();
            }
            None => break,
        }
    }
    found
}

/// Content of the last complete `\boxed{…}` region with balanced braces,
/// scanning non-overlapping occurrences left to right.
fn last_boxed_content(raw: &str) -> Option<&str> {
    const MARKER: &str = "\\boxed{";
    let mut cursor = 0;
    let mut found = None;
    while let Some(start) = raw[cursor..].find(MARKER) {
        let content_start = cursor + start + MARKER.len();
        match balanced_span(&raw[content_start..]) {
            Some(len) => {
                found = Some(&raw[content_start..content_start + len]);
                cursor = content_start + len + 1;
            }
            None => {
                // Unbalanced occurrence; skip past the marker and keep looking.
                cursor += start + MARKER.len();
            }
        }
    }
    found
}

/// Byte length of the content before the brace that closes an already-open
/// group, or `None` if the group never closes.
fn balanced_span(s: &str) -> Option<usize> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}
