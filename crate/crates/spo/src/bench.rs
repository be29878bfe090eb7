//! Offline scoring for finished prompts: accuracy against gold labels and
//! judge-decided win rates.
//!
//! Nothing here feeds the optimization loop. Gold answers exist only on this
//! side of the module boundary and flow into string comparisons, never into
//! rendered prompts; the win-rate judge sees model outputs only.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{self, Winner};
use crate::executor::{self, AnswerFormat};
use crate::llm::{LlmClient, LlmError};
use crate::optimizer::PromptCandidate;

/// One gold-labeled question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub question: String,
    pub gold: String,
}

/// A non-empty gold-labeled question set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSet(Vec<LabeledItem>);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("labeled set must not be empty")]
    EmptySet,
    #[error("labeled item {0} has an empty {1}")]
    EmptyField(usize, &'static str),
    #[error("cannot read labeled set: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed labeled set at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

impl LabeledSet {
    pub fn new(items: Vec<LabeledItem>) -> Result<Self, BenchError> {
        if items.is_empty() {
            return Err(BenchError::EmptySet);
        }
        for (i, item) in items.iter().enumerate() {
            if item.question.trim().is_empty() {
                return Err(BenchError::EmptyField(i, "question"));
            }
            if item.gold.trim().is_empty() {
                return Err(BenchError::EmptyField(i, "gold"));
            }
        }
        Ok(Self(items))
    }

    /// Parse JSON-lines `{"question": …, "gold": …}`.
    pub fn from_jsonl(source: &str) -> Result<Self, BenchError> {
        let mut items = Vec::new();
        for (i, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: LabeledItem =
                serde_json::from_str(line).map_err(|e| BenchError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            items.push(item);
        }
        Self::new(items)
    }

    pub fn from_path(path: &Path) -> Result<Self, BenchError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Answer matching rules for accuracy scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Trim, lowercase, collapse internal whitespace.
    #[default]
    Standard,
    /// Standard plus `\left`/`\right` removal and outer-brace stripping.
    Math,
}

impl Normalizer {
    pub fn apply(&self, s: &str) -> String {
        match self {
            Normalizer::Standard => collapse(s),
            Normalizer::Math => {
                let stripped = s.replace("\\left", "").replace("\\right", "");
                collapse(&strip_outer_braces(stripped.trim()))
            }
        }
    }
}

fn collapse(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn strip_outer_braces(s: &str) -> String {
    let mut current = s.trim();
    while current.len() >= 2 && current.starts_with('{') && current.ends_with('}') {
        // Only strip when the first brace closes at the very end.
        let mut depth = 0usize;
        let mut closes_at_end = false;
        for (i, c) in current.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        closes_at_end = i == current.len() - 1;
                        break;
                    }
                }
                _ => {}
            }
        }
        if !closes_at_end {
            break;
        }
        current = current[1..current.len() - 1].trim();
    }
    current.to_string()
}

/// Scoring detail for one labeled item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub question: String,
    pub gold: String,
    pub raw_output: String,
    pub extracted: Option<String>,
    pub correct: bool,
}

/// Accuracy over a labeled set, with per-item detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub items: Vec<ScoredItem>,
}

/// Execute `prompt` on every labeled question and score extracted answers
/// against the gold labels. Items with no extractable answer count as
/// incorrect; transport failures abort the scoring run.
pub fn score_accuracy(
    prompt: &PromptCandidate,
    set: &LabeledSet,
    format: &AnswerFormat,
    normalizer: Normalizer,
    client: &LlmClient,
) -> Result<AccuracyReport, BenchError> {
    let mut items = Vec::with_capacity(set.len());
    let mut correct = 0;
    for labeled in set.items() {
        let batch = executor::execute(
            prompt,
            std::slice::from_ref(&labeled.question),
            Some(format),
            false,
            client,
        )?;
        let item = batch
            .items
            .into_iter()
            .next()
            .expect("one item per question");
        let is_correct = item
            .extracted
            .as_deref()
            .map(|e| normalizer.apply(e) == normalizer.apply(&labeled.gold))
            .unwrap_or(false);
        if is_correct {
            correct += 1;
        }
        items.push(ScoredItem {
            question: labeled.question.clone(),
            gold: labeled.gold.clone(),
            raw_output: item.raw_output,
            extracted: item.extracted,
            correct: is_correct,
        });
    }
    Ok(AccuracyReport {
        accuracy: correct as f64 / set.len() as f64,
        correct,
        total: set.len(),
        items,
    })
}

/// Outcome of judging one question both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOutcome {
    WinA,
    WinB,
    /// Orientation disagreement or a failed call.
    Invalid,
}

/// Win-rate summary. A question contributes a win only when both slot
/// orientations agree on the same prompt; disagreement counts as invalid, so
/// pure position bias cannot move the reported rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub wins_a: usize,
    pub wins_b: usize,
    pub invalid: usize,
    /// Absent when no pair was decided.
    pub win_rate_a: Option<f64>,
    pub outcomes: Vec<PairOutcome>,
}

/// Execute both prompts on every question and judge each output pair twice
/// with swapped slots. Transport failures spoil the affected question only.
pub fn pairwise_winrate(
    prompt_a: &PromptCandidate,
    prompt_b: &PromptCandidate,
    questions: &[String],
    requirements: &str,
    eval_template: &str,
    client: &LlmClient,
) -> Result<WinRateReport, BenchError> {
    if questions.is_empty() {
        return Err(BenchError::EmptySet);
    }
    let mut wins_a = 0;
    let mut wins_b = 0;
    let mut invalid = 0;
    let mut outcomes = Vec::with_capacity(questions.len());
    for question in questions {
        let outcome = judge_pair(
            prompt_a,
            prompt_b,
            question,
            requirements,
            eval_template,
            client,
        );
        match outcome {
            PairOutcome::WinA => wins_a += 1,
            PairOutcome::WinB => wins_b += 1,
            PairOutcome::Invalid => invalid += 1,
        }
        outcomes.push(outcome);
    }
    let decided = wins_a + wins_b;
    Ok(WinRateReport {
        wins_a,
        wins_b,
        invalid,
        win_rate_a: (decided > 0).then(|| wins_a as f64 / decided as f64),
        outcomes,
    })
}

fn judge_pair(
    prompt_a: &PromptCandidate,
    prompt_b: &PromptCandidate,
    question: &String,
    requirements: &str,
    eval_template: &str,
    client: &LlmClient,
) -> PairOutcome {
    let questions = std::slice::from_ref(question);
    let batch_a = match executor::execute(prompt_a, questions, None, false, client) {
        Ok(b) => b,
        Err(_) => return PairOutcome::Invalid,
    };
    let batch_b = match executor::execute(prompt_b, questions, None, false, client) {
        Ok(b) => b,
        Err(_) => return PairOutcome::Invalid,
    };
    // Treat prompt A's batch as "new": round 0 puts it in slot A, round 1 in
    // slot B.
    let mut winners = Vec::with_capacity(2);
    for (round, a_in_slot_a) in [(0u32, true), (1u32, false)] {
        match evaluator::judge_round(
            requirements,
            &batch_a,
            &batch_b,
            a_in_slot_a,
            round,
            eval_template,
            client,
        ) {
            Ok(choice) => winners.push(choice.winner),
            Err(_) => return PairOutcome::Invalid,
        }
    }
    match (winners[0], winners[1]) {
        (Winner::New, Winner::New) => PairOutcome::WinA,
        (Winner::Incumbent, Winner::Incumbent) => PairOutcome::WinB,
        _ => PairOutcome::Invalid,
    }
}
