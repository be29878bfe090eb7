//! Pairwise output comparison: does the new prompt's batch beat the incumbent's?
//!
//! Each round renders both whole batches into the evaluation meta-prompt's A/B
//! slots and asks the evaluator model to pick a letter. Which batch sits in
//! slot A alternates deterministically across rounds (A, B, A, B, …), so each
//! side occupies each position equally often and a judge with pure position
//! bias can never force an acceptance. The verdict is a strict majority of New
//! wins over Incumbent wins; ties and unparseable rounds keep the incumbent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::ExecutionBatch;
use crate::llm::{LlmClient, LlmError, LlmRole};
use crate::optimizer::{first_tag_content, substitute_template};

/// Default evaluation meta-prompt, with `{requirement}`, `{Answer_A}`, and
/// `{Answer_B}` placeholders.
pub const EVALUATE_TEMPLATE: &str = include_str!("assets/evaluate_prompt.txt");

/// Who won one round, after mapping the judge's letter back through the slot
/// assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    New,
    Incumbent,
    /// The judge's reply had no usable `<choose>` letter.
    Invalid,
}

/// One judge call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundChoice {
    pub round_index: u32,
    /// Whether the NEW batch occupied slot A this round.
    pub new_in_slot_a: bool,
    pub winner: Winner,
    pub judge_analysis: String,
}

/// Aggregated accept/reject decision over all rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationVerdict {
    pub rounds: Vec<RoundChoice>,
    pub new_wins: u32,
    pub incumbent_wins: u32,
    pub invalid: u32,
    /// Strict majority: `new_wins > incumbent_wins`. Invalid rounds count for
    /// neither side.
    pub accepted: bool,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("batches answer different question lists and cannot be compared")]
    QuestionMismatch,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn check_aligned(a: &ExecutionBatch, b: &ExecutionBatch) -> Result<(), EvalError> {
    if a.items.len() != b.items.len() || !a.questions().eq(b.questions()) {
        return Err(EvalError::QuestionMismatch);
    }
    Ok(())
}

/// Render the evaluation meta-prompt over two aligned batches. Each slot is
/// the batch's numbered question/output blocks.
pub fn render_eval_prompt(
    requirements: &str,
    slot_a: &ExecutionBatch,
    slot_b: &ExecutionBatch,
    template: &str,
) -> Result<String, EvalError> {
    check_aligned(slot_a, slot_b)?;
    let answer_a = slot_a.render_numbered(false);
    let answer_b = slot_b.render_numbered(false);
    Ok(substitute_template(
        template,
        &[
            ("{requirement}", requirements),
            ("{Answer_A}", &answer_a),
            ("{Answer_B}", &answer_b),
        ],
    ))
}

/// Letter choice parsed from a judge reply: first complete `<choose>` region,
/// trimmed; only a lone A or B (any case) counts.
fn parse_choice(raw: &str) -> Option<char> {
    let content = first_tag_content(raw, "choose")?.trim();
    match content {
        "A" | "a" => Some('A'),
        "B" | "b" => Some('B'),
        _ => None,
    }
}

/// One evaluator-role call comparing the batches in the given slot order.
/// An unparseable reply yields [`Winner::Invalid`] without a retry.
pub fn judge_round(
    requirements: &str,
    new_batch: &ExecutionBatch,
    best_batch: &ExecutionBatch,
    new_in_slot_a: bool,
    round_index: u32,
    template: &str,
    client: &LlmClient,
) -> Result<RoundChoice, EvalError> {
    let (slot_a, slot_b) = if new_in_slot_a {
        (new_batch, best_batch)
    } else {
        (best_batch, new_batch)
    };
    let rendered = render_eval_prompt(requirements, slot_a, slot_b, template)?;
    let response = client.complete_with_retry(&client.request(LlmRole::Evaluator, rendered))?;
    let judge_analysis = first_tag_content(&response.text, "analyse")
        .unwrap_or("")
        .trim()
        .to_string();
    let winner = match parse_choice(&response.text) {
        Some('A') => {
            if new_in_slot_a {
                Winner::New
            } else {
                Winner::Incumbent
            }
        }
        Some(_) => {
            if new_in_slot_a {
                Winner::Incumbent
            } else {
                Winner::New
            }
        }
        None => Winner::Invalid,
    };
    Ok(RoundChoice {
        round_index,
        new_in_slot_a,
        winner,
        judge_analysis,
    })
}

/// The default slot schedule: the new batch takes slot A on even rounds.
pub fn alternating_slots(rounds: u32) -> Vec<bool> {
    (0..rounds).map(|i| i % 2 == 0).collect()
}

/// Run one judge call per slot assignment and aggregate with the strict
/// majority rule.
pub fn compare_with_slots(
    requirements: &str,
    new_batch: &ExecutionBatch,
    best_batch: &ExecutionBatch,
    slots: &[bool],
    template: &str,
    client: &LlmClient,
) -> Result<EvaluationVerdict, EvalError> {
    if slots.is_empty() {
        return Err(EvalError::Llm(LlmError::InvalidRequest(
            "at least one evaluation round is required".into(),
        )));
    }
    check_aligned(new_batch, best_batch)?;
    let mut rounds = Vec::with_capacity(slots.len());
    for (i, &new_in_slot_a) in slots.iter().enumerate() {
        rounds.push(judge_round(
            requirements,
            new_batch,
            best_batch,
            new_in_slot_a,
            i as u32,
            template,
            client,
        )?);
    }
    Ok(aggregate(rounds))
}

/// Position-counterbalanced comparison over `rounds` judge calls.
pub fn compare(
    requirements: &str,
    new_batch: &ExecutionBatch,
    best_batch: &ExecutionBatch,
    rounds: u32,
    template: &str,
    client: &LlmClient,
) -> Result<EvaluationVerdict, EvalError> {
    compare_with_slots(
        requirements,
        new_batch,
        best_batch,
        &alternating_slots(rounds),
        template,
        client,
    )
}

/// Tally round winners into a verdict.
pub fn aggregate(rounds: Vec<RoundChoice>) -> EvaluationVerdict {
    let mut new_wins = 0;
    let mut incumbent_wins = 0;
    let mut invalid = 0;
    for round in &rounds {
        match round.winner {
            Winner::New => new_wins += 1,
            Winner::Incumbent => incumbent_wins += 1,
            Winner::Invalid => invalid += 1,
        }
    }
    EvaluationVerdict {
        rounds,
        new_wins,
        incumbent_wins,
        invalid,
        accepted: new_wins > incumbent_wins,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::executor::BatchItem;
    use crate::llm::scripted::{Script, ScriptItem, ScriptedBackend};
    use crate::llm::{Budget, PriceTable, RoleConfigs};

    fn batch(iteration: u64, pairs: &[(&str, &str)]) -> ExecutionBatch {
        ExecutionBatch {
            prompt_iteration: iteration,
            items: pairs
                .iter()
                .map(|(q, a)| BatchItem {
                    question: q.to_string(),
                    raw_output: a.to_string(),
                    extracted: None,
                })
                .collect(),
        }
    }

    fn judge_client(replies: &[&str]) -> LlmClient {
        let backend = Arc::new(ScriptedBackend::new(Script {
            evaluator: replies.iter().map(|r| ScriptItem::text(*r)).collect(),
            ..Default::default()
        }));
        LlmClient::over_script(
            backend,
            RoleConfigs::scripted(),
            PriceTable::default(),
            Budget::default(),
        )
    }

    #[test]
    fn render_places_batches_in_slots() {
        let a = batch(1, &[("q1", "new1"), ("q2", "new2"), ("q3", "new3")]);
        let b = batch(0, &[("q1", "old1"), ("q2", "old2"), ("q3", "old3")]);
        let rendered = render_eval_prompt("req", &a, &b, EVALUATE_TEMPLATE).unwrap();
        assert!(rendered.contains("# A\nQuestion 1: q1\nAnswer 1: new1"));
        assert!(rendered.contains("# B\nQuestion 1: q1\nAnswer 1: old1"));
        assert!(rendered.contains("# Requirement\nreq"));
    }

    #[test]
    fn render_rejects_mismatched_questions() {
        let a = batch(1, &[("q1", "x")]);
        let b = batch(0, &[("other", "y")]);
        assert!(matches!(
            render_eval_prompt("req", &a, &b, EVALUATE_TEMPLATE),
            Err(EvalError::QuestionMismatch)
        ));
    }

    #[test]
    fn render_single_item_batches() {
        let a = batch(1, &[("q", "na")]);
        let b = batch(0, &[("q", "oa")]);
        let rendered = render_eval_prompt("req", &a, &b, EVALUATE_TEMPLATE).unwrap();
        assert!(rendered.contains("# A\nQuestion 1: q\nAnswer 1: na\n\n# B"));
    }

    #[test]
    fn slot_mapping_choose_a_new_in_a() {
        let client = judge_client(&["<analyse>x</analyse><choose>A</choose>"]);
        let round = judge_round(
            "r",
            &batch(1, &[("q", "n")]),
            &batch(0, &[("q", "o")]),
            true,
            0,
            EVALUATE_TEMPLATE,
            &client,
        )
        .unwrap();
        assert_eq!(round.winner, Winner::New);
        assert_eq!(round.judge_analysis, "x");
    }

    #[test]
    fn slot_mapping_choose_a_new_in_b() {
        let client = judge_client(&["<choose>A</choose>"]);
        let round = judge_round(
            "r",
            &batch(1, &[("q", "n")]),
            &batch(0, &[("q", "o")]),
            false,
            0,
            EVALUATE_TEMPLATE,
            &client,
        )
        .unwrap();
        assert_eq!(round.winner, Winner::Incumbent);
    }

    #[test]
    fn unparseable_choice_is_invalid() {
        for reply in ["<choose>C</choose>", "<choose>A/B</choose>", "no tags"] {
            let client = judge_client(&[reply]);
            let round = judge_round(
                "r",
                &batch(1, &[("q", "n")]),
                &batch(0, &[("q", "o")]),
                true,
                0,
                EVALUATE_TEMPLATE,
                &client,
            )
            .unwrap();
            assert_eq!(round.winner, Winner::Invalid, "reply {reply:?}");
        }
    }

    // Letters that make round i come out as `winner` under alternating slots.
    fn letter_for(round: usize, winner: Winner) -> &'static str {
        let new_in_a = round.is_multiple_of(2);
        match (winner, new_in_a) {
            (Winner::New, true) | (Winner::Incumbent, false) => "<choose>A</choose>",
            (Winner::New, false) | (Winner::Incumbent, true) => "<choose>B</choose>",
            (Winner::Invalid, _) => "<choose>?</choose>",
        }
    }

    fn run_compare(winners: &[Winner]) -> EvaluationVerdict {
        let replies: Vec<String> = winners
            .iter()
            .enumerate()
            .map(|(i, w)| letter_for(i, *w).to_string())
            .collect();
        let refs: Vec<&str> = replies.iter().map(|s| s.as_str()).collect();
        let client = judge_client(&refs);
        compare(
            "r",
            &batch(1, &[("q", "n")]),
            &batch(0, &[("q", "o")]),
            winners.len() as u32,
            EVALUATE_TEMPLATE,
            &client,
        )
        .unwrap()
    }

    #[test]
    fn majority_accepts() {
        use Winner::*;
        let verdict = run_compare(&[New, New, Incumbent, New]);
        assert!(verdict.accepted);
        assert_eq!(
            (verdict.new_wins, verdict.incumbent_wins, verdict.invalid),
            (3, 1, 0)
        );
    }

    #[test]
    fn tie_retains_incumbent() {
        use Winner::*;
        let verdict = run_compare(&[New, New, Incumbent, Incumbent]);
        assert!(!verdict.accepted);
    }

    #[test]
    fn single_valid_new_win_among_invalids_accepts() {
        use Winner::*;
        let verdict = run_compare(&[New, Invalid, Invalid, Invalid]);
        assert!(verdict.accepted);
        assert_eq!(
            (verdict.new_wins, verdict.incumbent_wins, verdict.invalid),
            (1, 0, 3)
        );
    }

    #[test]
    fn counterbalance_over_even_rounds() {
        for rounds in [2u32, 4, 6, 8] {
            let slots = alternating_slots(rounds);
            let in_a = slots.iter().filter(|&&s| s).count();
            assert_eq!(in_a as u32, rounds / 2);
        }
    }

    fn compare_with_replies(
        first: &ExecutionBatch,
        second: &ExecutionBatch,
        replies: &[String],
    ) -> EvaluationVerdict {
        let refs: Vec<&str> = replies.iter().map(|s| s.as_str()).collect();
        let client = judge_client(&refs);
        compare(
            "r",
            first,
            second,
            replies.len() as u32,
            EVALUATE_TEMPLATE,
            &client,
        )
        .unwrap()
    }

    // Swapping the batch arguments while negating every judge letter flips
    // the verdict, except ties, which keep the incumbent both ways.
    #[test]
    fn symmetry_under_swap_and_letter_negation() {
        use Winner::*;
        let batch_x = batch(1, &[("q", "x")]);
        let batch_y = batch(0, &[("q", "y")]);
        let outcomes = [New, Incumbent, Invalid];
        for code in 0..81usize {
            let pattern: Vec<Winner> = (0..4u32)
                .map(|r| outcomes[(code / 3usize.pow(r)) % 3])
                .collect();
            let letters: Vec<String> = pattern
                .iter()
                .enumerate()
                .map(|(i, w)| letter_for(i, *w).to_string())
                .collect();
            let negated: Vec<String> = letters
                .iter()
                .map(|l| match l.as_str() {
                    "<choose>A</choose>" => "<choose>B</choose>".to_string(),
                    "<choose>B</choose>" => "<choose>A</choose>".to_string(),
                    other => other.to_string(),
                })
                .collect();
            let forward = compare_with_replies(&batch_x, &batch_y, &letters);
            let swapped = compare_with_replies(&batch_y, &batch_x, &negated);
            assert_eq!(
                forward.new_wins, swapped.incumbent_wins,
                "pattern {pattern:?}"
            );
            assert_eq!(
                forward.incumbent_wins, swapped.new_wins,
                "pattern {pattern:?}"
            );
            assert_eq!(forward.invalid, swapped.invalid, "pattern {pattern:?}");
            if forward.new_wins == forward.incumbent_wins {
                assert!(
                    !forward.accepted && !swapped.accepted,
                    "tie pattern {pattern:?}"
                );
            } else {
                assert_eq!(swapped.accepted, !forward.accepted, "pattern {pattern:?}");
            }
        }
    }

    #[test]
    fn pure_position_bias_cannot_force_acceptance() {
        let client = judge_client(&["<choose>A</choose>"; 4]);
        let verdict = compare(
            "r",
            &batch(1, &[("q", "n")]),
            &batch(0, &[("q", "o")]),
            4,
            EVALUATE_TEMPLATE,
            &client,
        )
        .unwrap();
        assert_eq!((verdict.new_wins, verdict.incumbent_wins), (2, 2));
        assert!(!verdict.accepted);
    }

    #[test]
    fn exactly_rounds_many_calls() {
        let client = judge_client(&["<choose>B</choose>"; 4]);
        compare(
            "r",
            &batch(1, &[("q", "n")]),
            &batch(0, &[("q", "o")]),
            4,
            EVALUATE_TEMPLATE,
            &client,
        )
        .unwrap();
        assert_eq!(client.ledger().per_role().evaluator.calls, 4);
    }
}
