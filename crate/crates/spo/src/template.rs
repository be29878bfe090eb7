//! Task templates: the YAML file that seeds an optimization run.
//!
//! A template carries the initial prompt, a free-form requirements string
//! injected into both meta-prompts, and a pool of questions the loop samples
//! from. The optional `answer` on each pool entry is a thought-process and
//! format sketch only; it is never injected into any meta-prompt and never
//! used as an evaluation reference, which keeps the loop reference-free.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::executor::AnswerFormat;

/// One question-pool entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaEntry {
    pub question: String,
    /// Format/thought-process sketch, not a gold answer.
    pub answer_hint: Option<String>,
}

/// The seed of an optimization run: initial prompt, requirements, question pool.
///
/// Immutable after load; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTemplate {
    pub prompt: String,
    pub requirements: String,
    pub entries: Vec<QaEntry>,
    pub answer_format: Option<AnswerFormat>,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("malformed YAML document{}: {message}", location_suffix(*line, *column))]
    MalformedDocument {
        message: String,
        line: Option<usize>,
        column: Option<usize>,
    },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}` must be {expected}")]
    InvalidValue { key: String, expected: &'static str },
    #[error("`prompt` must not be empty")]
    EmptyPrompt,
    #[error("`faq` must contain at least one entry")]
    EmptyQuestionPool,
    #[error("faq entry {0} has an empty question")]
    EmptyQuestion(usize),
    #[error("cannot read template file: {0}")]
    Io(#[from] std::io::Error),
}

fn location_suffix(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l}, column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

/// Non-fatal findings about a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    EmptyRequirements,
    PoolSmallerThanSampleCount { pool: usize, requested: usize },
    AnswerHintLooksLikeAnswer { entry: usize },
    UnknownTopLevelKey(String),
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::EmptyRequirements => write!(f, "`requirements` is empty"),
            Warning::PoolSmallerThanSampleCount { pool, requested } => write!(
                f,
                "question pool has {pool} entries but {requested} samples are requested per iteration; sampling will repeat questions"
            ),
            Warning::AnswerHintLooksLikeAnswer { entry } => write!(
                f,
                "faq entry {entry}: `answer` looks like a concrete final answer rather than a format sketch; it is ignored by the loop either way"
            ),
            Warning::UnknownTopLevelKey(key) => write!(f, "unknown top-level key `{key}` ignored"),
        }
    }
}

const KNOWN_KEYS: &[&str] = &["prompt", "requirements", "faq", "answer_format"];

/// Load a template from YAML text. See [`load_template_with_warnings`] for the
/// variant that also reports non-fatal findings.
pub fn load_template(source: &str) -> Result<TaskTemplate, TemplateError> {
    load_template_with_warnings(source).map(|(t, _)| t)
}

/// Load a template from a file path.
pub fn load_template_path(path: &Path) -> Result<TaskTemplate, TemplateError> {
    let source = std::fs::read_to_string(path)?;
    load_template(&source)
}

/// Load a template from YAML text, returning load-time warnings (currently:
/// unknown top-level keys).
pub fn load_template_with_warnings(
    source: &str,
) -> Result<(TaskTemplate, Vec<Warning>), TemplateError> {
    let value: serde_yaml::Value = serde_yaml::from_str(source).map_err(yaml_error)?;
    let map = value
        .as_mapping()
        .ok_or_else(|| TemplateError::MalformedDocument {
            message: "top level must be a mapping".into(),
            line: None,
            column: None,
        })?;

    let mut warnings = Vec::new();
    for key in map.keys() {
        if let Some(name) = key.as_str() {
            if !KNOWN_KEYS.contains(&name) {
                warnings.push(Warning::UnknownTopLevelKey(name.to_string()));
            }
        }
    }

    let prompt = required_text(map, "prompt")?;
    if prompt.is_empty() {
        return Err(TemplateError::EmptyPrompt);
    }

    // The literal text `None` means "absent"; it appears in open-ended
    // templates that have no format constraints.
    let requirements = none_as_empty(required_text(map, "requirements")?);

    let faq = map
        .get(serde_yaml::Value::from("faq"))
        .ok_or_else(|| TemplateError::MissingKey("faq".into()))?;
    let items = faq
        .as_sequence()
        .ok_or_else(|| TemplateError::InvalidValue {
            key: "faq".into(),
            expected: "a list of {question, answer} entries",
        })?;
    if items.is_empty() {
        return Err(TemplateError::EmptyQuestionPool);
    }

    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let entry = item
            .as_mapping()
            .ok_or_else(|| TemplateError::InvalidValue {
                key: format!("faq[{i}]"),
                expected: "a mapping with `question` and optional `answer`",
            })?;
        let question = entry
            .get(serde_yaml::Value::from("question"))
            .ok_or_else(|| TemplateError::MissingKey(format!("faq[{i}].question")))?
            .as_str()
            .ok_or_else(|| TemplateError::InvalidValue {
                key: format!("faq[{i}].question"),
                expected: "text",
            })?
            .trim()
            .to_string();
        if question.is_empty() {
            return Err(TemplateError::EmptyQuestion(i));
        }
        let answer_hint = match entry.get(serde_yaml::Value::from("answer")) {
            None => None,
            Some(v) if v.is_null() => None,
            Some(v) => {
                let text = v.as_str().ok_or_else(|| TemplateError::InvalidValue {
                    key: format!("faq[{i}].answer"),
                    expected: "text",
                })?;
                let trimmed = text.trim();
                if trimmed.is_empty() || trimmed == "None" {
                    None
                } else {
                    Some(trimmed.to_string())
                }
            }
        };
        entries.push(QaEntry {
            question,
            answer_hint,
        });
    }

    let answer_format = match map.get(serde_yaml::Value::from("answer_format")) {
        None => None,
        Some(v) if v.is_null() => None,
        Some(v) => {
            let parsed = serde_yaml::from_value::<AnswerFormat>(v.clone()).map_err(|_| {
                TemplateError::InvalidValue {
                    key: "answer_format".into(),
                    expected: "a mapping like {kind: xml_tag|boxed|raw, tag: answer}",
                }
            })?;
            Some(parsed)
        }
    };

    let template = TaskTemplate {
        prompt,
        requirements,
        entries,
        answer_format,
    };
    Ok((template, warnings))
}

fn yaml_error(e: serde_yaml::Error) -> TemplateError {
    let (line, column) = match e.location() {
        Some(loc) => (Some(loc.line()), Some(loc.column())),
        None => (None, None),
    };
    TemplateError::MalformedDocument {
        message: e.to_string(),
        line,
        column,
    }
}

fn required_text(map: &serde_yaml::Mapping, key: &str) -> Result<String, TemplateError> {
    let value = map
        .get(serde_yaml::Value::from(key))
        .ok_or_else(|| TemplateError::MissingKey(key.into()))?;
    if value.is_null() {
        return Ok(String::new());
    }
    value
        .as_str()
        .map(|s| s.trim().to_string())
        .ok_or_else(|| TemplateError::InvalidValue {
            key: key.into(),
            expected: "text",
        })
}

fn none_as_empty(s: String) -> String {
    if s == "None" {
        String::new()
    } else {
        s
    }
}

/// Serialize a template back to YAML with the same key schema the loader
/// accepts, so `load_template(serialize_template(t))` reproduces `t`.
pub fn serialize_template(t: &TaskTemplate) -> String {
    use serde_yaml::{Mapping, Value};

    let mut root = Mapping::new();
    root.insert(Value::from("prompt"), Value::from(t.prompt.clone()));
    root.insert(
        Value::from("requirements"),
        Value::from(if t.requirements.is_empty() {
            "None".to_string()
        } else {
            t.requirements.clone()
        }),
    );
    let faq: Vec<Value> = t
        .entries
        .iter()
        .map(|e| {
            let mut m = Mapping::new();
            m.insert(Value::from("question"), Value::from(e.question.clone()));
            m.insert(
                Value::from("answer"),
                Value::from(e.answer_hint.clone().unwrap_or_else(|| "None".into())),
            );
            Value::Mapping(m)
        })
        .collect();
    root.insert(Value::from("faq"), Value::Sequence(faq));
    if let Some(fmt) = &t.answer_format {
        root.insert(
            Value::from("answer_format"),
            serde_yaml::to_value(fmt).expect("answer format serializes"),
        );
    }
    serde_yaml::to_string(&Value::Mapping(root)).expect("template serializes")
}

/// Check a loaded template for non-fatal issues. `sample_count` is the number
/// of questions the loop will draw per iteration.
pub fn validate_template(t: &TaskTemplate, sample_count: usize) -> Vec<Warning> {
    let mut warnings = Vec::new();
    if t.requirements.is_empty() {
        warnings.push(Warning::EmptyRequirements);
    }
    if t.entries.len() < sample_count {
        warnings.push(Warning::PoolSmallerThanSampleCount {
            pool: t.entries.len(),
            requested: sample_count,
        });
    }
    for (i, entry) in t.entries.iter().enumerate() {
        if let (Some(hint), Some(fmt)) = (&entry.answer_hint, &t.answer_format) {
            if hint_looks_concrete(hint, fmt) {
                warnings.push(Warning::AnswerHintLooksLikeAnswer { entry: i });
            }
        }
    }
    warnings
}

// A hint is suspicious when the configured answer delimiter extracts a value
// from it and that value has no placeholder markers like "(Yes or No)" or
// "[...]".
fn hint_looks_concrete(hint: &str, fmt: &AnswerFormat) -> bool {
    if matches!(fmt, AnswerFormat::Raw) {
        return false;
    }
    match crate::executor::extract_answer(hint, fmt) {
        Some(extracted) => {
            !extracted.is_empty() && !extracted.contains(['(', ')', '[', ']', '|', '…'])
        }
        None => false,
    }
}
