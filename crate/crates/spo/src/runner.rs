//! The optimization loop: bootstrap, propose, execute, compare, update.
//!
//! Per iteration: one optimizer call proposes a candidate, `sample_count`
//! executor calls answer the questions with it, and `eval_rounds` evaluator
//! calls judge the new batch against the incumbent's: 8 calls per iteration
//! with the defaults (1 + 3 + 4). The incumbent is replaced only when the
//! verdict accepts the candidate; failed iterations (malformed proposal,
//! duplicate prompt, transport failure) keep the incumbent and still consume
//! the iteration counter, so total cost stays bounded.
//!
//! Two sampling modes:
//!
//! - `FixedOnce` draws the questions once before the loop and caches the
//!   incumbent's outputs, giving exactly the 8-call budget per iteration.
//! - `ResamplePerIteration` (default) draws fresh questions each iteration and
//!   re-executes the incumbent on them before comparison, costing an extra
//!   `sample_count` executor calls per iteration from the second one on.
//!
//! Question sampling and slot randomization derive their RNG from the seed
//! and the iteration index (not from sequential consumption), so a resumed
//! run reproduces the uninterrupted one exactly.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{self, EvalError};
use crate::executor::{self, AnswerFormat, ExecutionBatch};
use crate::llm::{Budget, LedgerSnapshot, LlmClient, LlmError, LlmRole, RoleTotals, Usage};
use crate::optimizer::{self, PromptCandidate, ProposeError};
use crate::template::{self, TaskTemplate, TemplateError};
use crate::trajectory::{
    BootstrapRecord, IterationRecord, IterationStatus, RunDir, TrajectoryError, TrajectoryStore,
};

/// Whether questions are drawn once up front or afresh each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    FixedOnce,
    ResamplePerIteration,
}

/// Loop parameters. Defaults: 10 iterations, 3 samples, 4 evaluation rounds,
/// per-iteration resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_iterations: u64,
    pub sample_count: usize,
    pub eval_rounds: u32,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    pub budget: Budget,
    /// Draw slot assignments from the seeded RNG instead of the deterministic
    /// A,B,A,B alternation.
    pub randomize_slots: bool,
    /// Send the prompt as the system message instead of prepending it to the
    /// question.
    pub as_system: bool,
    /// Overrides the template's answer format when set.
    pub answer_format: Option<AnswerFormat>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            sample_count: 3,
            eval_rounds: 4,
            sampling_mode: SamplingMode::ResamplePerIteration,
            seed: 0,
            budget: Budget::default(),
            randomize_slots: false,
            as_system: false,
            answer_format: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, template: &TaskTemplate) -> Result<(), RunError> {
        if self.max_iterations == 0 {
            return Err(RunError::Config("max_iterations must be at least 1".into()));
        }
        if self.sample_count == 0 {
            return Err(RunError::Config("sample_count must be at least 1".into()));
        }
        if self.eval_rounds == 0 {
            return Err(RunError::Config("eval_rounds must be at least 1".into()));
        }
        if self.sampling_mode == SamplingMode::FixedOnce
            && self.sample_count > template.entries.len()
        {
            return Err(RunError::Config(format!(
                "sample_count {} exceeds the question pool ({} entries) under fixed_once sampling",
                self.sample_count,
                template.entries.len()
            )));
        }
        if let Some(max_cost) = self.budget.max_cost {
            if max_cost < 0.0 {
                return Err(RunError::Config(
                    "budget.max_cost must not be negative".into(),
                ));
            }
        }
        Ok(())
    }

    fn effective_format<'a>(&'a self, template: &'a TaskTemplate) -> Option<&'a AnswerFormat> {
        self.answer_format
            .as_ref()
            .or(template.answer_format.as_ref())
    }
}

/// The two meta-prompt texts the loop renders. Defaults are the built-in
/// assets; CLI flags can swap in user-edited files.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTemplates {
    pub optimize: String,
    pub evaluate: String,
}

impl Default for MetaTemplates {
    fn default() -> Self {
        Self {
            optimize: optimizer::OPTIMIZE_TEMPLATE.to_string(),
            evaluate: evaluator::EVALUATE_TEMPLATE.to_string(),
        }
    }
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    /// The candidate of the last accepted iteration, or the seed when nothing
    /// was accepted.
    pub best: PromptCandidate,
    /// The incumbent's most recent execution.
    pub best_batch: ExecutionBatch,
    pub trajectory: Vec<IterationRecord>,
    pub ledger: LedgerSnapshot,
    /// True when the run halted early on budget exhaustion.
    pub truncated: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bootstrap execution failed: {0}")]
    Bootstrap(#[source] LlmError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

// Distinct RNG streams per iteration make resumed runs reproduce the
// uninterrupted ones without replaying RNG consumption.
fn rng_for_questions(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration * 2);
    rng
}

fn rng_for_slots(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration * 2 + 1);
    rng
}

/// Draw `k` questions: uniformly without replacement when the pool is large
/// enough, with replacement otherwise.
pub fn sample_questions<R: rand::Rng + ?Sized>(
    template: &TaskTemplate,
    k: usize,
    rng: &mut R,
) -> Vec<String> {
    let pool = template.entries.len();
    if pool >= k {
        rand::seq::index::sample(rng, pool, k)
            .into_iter()
            .map(|i| template.entries[i].question.clone())
            .collect()
    } else {
        (0..k)
            .map(|_| template.entries[rng.random_range(0..pool)].question.clone())
            .collect()
    }
}

struct LoopState {
    incumbent: PromptCandidate,
    incumbent_batch: ExecutionBatch,
    bootstrap_questions: Vec<String>,
    records: Vec<IterationRecord>,
    truncated: bool,
}

/// Run the full loop from the seed prompt. Every iteration is appended to
/// `store` before the next one starts.
pub fn run(
    template: &TaskTemplate,
    config: &RunConfig,
    templates: &MetaTemplates,
    client: &LlmClient,
    store: &mut dyn TrajectoryStore,
) -> Result<OptimizationResult, RunError> {
    config.validate(template)?;
    let format = config.effective_format(template);
    let seed_candidate = PromptCandidate::seed(template.prompt.clone());

    // Bootstrap: the incumbent's outputs must exist before iteration 1 can
    // compare against them. Under per-iteration resampling these are the
    // questions iteration 1 will use.
    let bootstrap_stream = match config.sampling_mode {
        SamplingMode::FixedOnce => 0,
        SamplingMode::ResamplePerIteration => 1,
    };
    let questions = sample_questions(
        template,
        config.sample_count,
        &mut rng_for_questions(config.seed, bootstrap_stream),
    );
    let before = client.role_totals();
    let batch = executor::execute(
        &seed_candidate,
        &questions,
        format,
        config.as_system,
        client,
    )
    .map_err(RunError::Bootstrap)?;
    let bootstrap = BootstrapRecord {
        questions: questions.clone(),
        batch: batch.clone(),
        usage: usage_delta(client, &before),
    };
    store.save_bootstrap(&bootstrap)?;

    let state = LoopState {
        incumbent: seed_candidate,
        incumbent_batch: batch,
        bootstrap_questions: questions,
        records: Vec::new(),
        truncated: false,
    };
    run_iterations(1, state, template, config, templates, client, store)
}

/// Continue a persisted run until `max_iterations`, reproducing the exact
/// records an uninterrupted run would have written.
pub fn resume(
    dir: &Path,
    templates: &MetaTemplates,
    client: &LlmClient,
) -> Result<OptimizationResult, RunError> {
    let mut run_dir = RunDir::open_existing(dir)?;
    let meta = run_dir.load_meta()?;
    let template = template::load_template(&meta.template_yaml)?;
    let config = meta.config.run;
    let records = run_dir.load_records()?;
    let bootstrap = match run_dir.load_bootstrap()? {
        Some(b) => b,
        None if records.is_empty() => {
            // Nothing happened before the crash; start over in place.
            return run(&template, &config, templates, client, &mut run_dir);
        }
        None => {
            return Err(RunError::Resume(
                "trajectory has records but bootstrap.json is missing".into(),
            ))
        }
    };

    for (i, record) in records.iter().enumerate() {
        if record.index != i as u64 + 1 {
            return Err(RunError::Resume(format!(
                "record {} has index {}, expected {}",
                i + 1,
                record.index,
                i + 1
            )));
        }
    }

    // Skip script entries the interrupted process consumed and fold its usage
    // into this ledger so budget caps cover the whole run.
    let mut consumed = bootstrap.usage;
    for record in &records {
        consumed.merge(&record.usage);
    }
    for role in LlmRole::ALL {
        client.fast_forward(role, consumed.get(role).calls)?;
    }
    client.absorb_prior_usage(&consumed);

    let last_accepted = records.iter().rev().find(|r| r.accepted);
    let (incumbent, incumbent_batch) = match last_accepted {
        Some(record) => {
            let candidate = record.candidate.clone().ok_or_else(|| {
                RunError::Resume(format!("accepted record {} has no candidate", record.index))
            })?;
            let batch = record.batch.clone().ok_or_else(|| {
                RunError::Resume(format!("accepted record {} has no batch", record.index))
            })?;
            (candidate, batch)
        }
        None => (
            PromptCandidate::seed(template.prompt.clone()),
            bootstrap.batch.clone(),
        ),
    };

    let start = records.last().map(|r| r.index + 1).unwrap_or(1);
    let state = LoopState {
        incumbent,
        incumbent_batch,
        bootstrap_questions: bootstrap.questions,
        records,
        truncated: false,
    };
    run_iterations(
        start,
        state,
        &template,
        &config,
        templates,
        client,
        &mut run_dir,
    )
}

fn run_iterations(
    start: u64,
    mut state: LoopState,
    template: &TaskTemplate,
    config: &RunConfig,
    templates: &MetaTemplates,
    client: &LlmClient,
    store: &mut dyn TrajectoryStore,
) -> Result<OptimizationResult, RunError> {
    let format = config.effective_format(template);

    for index in start..=config.max_iterations {
        let before = client.role_totals();
        let questions = match config.sampling_mode {
            SamplingMode::FixedOnce => state.bootstrap_questions.clone(),
            SamplingMode::ResamplePerIteration if index == 1 => state.bootstrap_questions.clone(),
            SamplingMode::ResamplePerIteration => sample_questions(
                template,
                config.sample_count,
                &mut rng_for_questions(config.seed, index),
            ),
        };

        let mut candidate = None;
        let mut batch = None;
        let mut verdict = None;
        let mut accepted = false;
        let mut status = IterationStatus::Completed;
        let mut error = None;

        'iteration: {
            if config.sampling_mode == SamplingMode::ResamplePerIteration && index > 1 {
                match executor::execute(
                    &state.incumbent,
                    &questions,
                    format,
                    config.as_system,
                    client,
                ) {
                    Ok(fresh) => state.incumbent_batch = fresh,
                    Err(e) => {
                        status = IterationStatus::FailedExecute;
                        state.truncated = e.is_budget();
                        error = Some(format!("incumbent re-execution failed: {e}"));
                        break 'iteration;
                    }
                }
            }

            let proposal = match optimizer::propose(
                &state.incumbent,
                &state.incumbent_batch,
                &template.requirements,
                index,
                &templates.optimize,
                format,
                client,
            ) {
                Ok(c) => c,
                Err(e) => {
                    status = IterationStatus::FailedPropose;
                    state.truncated = matches!(&e, ProposeError::Llm(le) if le.is_budget());
                    error = Some(e.to_string());
                    break 'iteration;
                }
            };
            candidate = Some(proposal.clone());

            let new_batch =
                match executor::execute(&proposal, &questions, format, config.as_system, client) {
                    Ok(b) => b,
                    Err(e) => {
                        status = IterationStatus::FailedExecute;
                        state.truncated = e.is_budget();
                        error = Some(e.to_string());
                        break 'iteration;
                    }
                };
            batch = Some(new_batch.clone());

            let slots = if config.randomize_slots {
                let mut rng = rng_for_slots(config.seed, index);
                (0..config.eval_rounds)
                    .map(|_| rng.random_bool(0.5))
                    .collect()
            } else {
                evaluator::alternating_slots(config.eval_rounds)
            };
            let outcome = match evaluator::compare_with_slots(
                &template.requirements,
                &new_batch,
                &state.incumbent_batch,
                &slots,
                &templates.evaluate,
                client,
            ) {
                Ok(v) => v,
                Err(e) => {
                    status = IterationStatus::FailedEvaluate;
                    state.truncated = matches!(&e, EvalError::Llm(le) if le.is_budget());
                    error = Some(e.to_string());
                    break 'iteration;
                }
            };
            accepted = outcome.accepted;
            verdict = Some(outcome);
            if accepted {
                state.incumbent = proposal;
                state.incumbent_batch = new_batch;
            }
        }

        let record = IterationRecord {
            index,
            candidate,
            batch,
            verdict,
            accepted,
            questions,
            usage: usage_delta(client, &before),
            status,
            error,
        };
        store.append(&record)?;
        state.records.push(record);

        if state.truncated {
            break;
        }
    }

    Ok(OptimizationResult {
        best: state.incumbent,
        best_batch: state.incumbent_batch,
        trajectory: state.records,
        ledger: client.snapshot(),
        truncated: state.truncated,
    })
}

/// Per-role ledger movement since `before`. Cost is recomputed from the token
/// deltas and the role's model price, so the value is a pure function of the
/// iteration's calls and identical across resumed and uninterrupted runs.
fn usage_delta(client: &LlmClient, before: &RoleTotals) -> RoleTotals {
    let after = client.role_totals();
    let mut delta = RoleTotals::default();
    for role in LlmRole::ALL {
        let b = before.get(role);
        let a = after.get(role);
        let d = delta.get_mut(role);
        d.calls = a.calls - b.calls;
        d.prompt_tokens = a.prompt_tokens - b.prompt_tokens;
        d.completion_tokens = a.completion_tokens - b.completion_tokens;
        let model = &client.role_config(role).model;
        d.cost = client
            .ledger()
            .price_table()
            .cost_of(model, Usage::new(d.prompt_tokens, d.completion_tokens))
            .unwrap_or(0.0);
    }
    delta
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm::scripted::{Script, ScriptItem, ScriptedBackend};
    use crate::llm::{PriceTable, RoleConfigs};
    use crate::template::load_template;
    use crate::trajectory::MemoryStore;

    fn template(pool: usize) -> TaskTemplate {
        let mut doc = String::from("prompt: Seed prompt.\nrequirements: Be helpful.\nfaq:\n");
        for i in 0..pool {
            doc.push_str(&format!("  - question: question {i}\n"));
        }
        load_template(&doc).unwrap()
    }

    fn fixed_once_config(seed: u64) -> RunConfig {
        RunConfig {
            sampling_mode: SamplingMode::FixedOnce,
            seed,
            ..RunConfig::default()
        }
    }

    /// Judge replies that reject on every round under alternating slots.
    fn rejecting_round_letters() -> [&'static str; 4] {
        // Round 0/2: new batch in slot A, pick B. Round 1/3: new in B, pick A.
        [
            "<choose>B</choose>",
            "<choose>A</choose>",
            "<choose>B</choose>",
            "<choose>A</choose>",
        ]
    }

    fn accepting_round_letters() -> [&'static str; 4] {
        [
            "<choose>A</choose>",
            "<choose>B</choose>",
            "<choose>A</choose>",
            "<choose>B</choose>",
        ]
    }

    /// A 10-iteration script where only `accept_at` is accepted and its prompt
    /// carries a distinctive token.
    fn scenario_script(accept_at: u64) -> Script {
        let mut script = Script::default();
        for _ in 0..3 {
            script.executor.push(ScriptItem::text("seed output"));
        }
        for i in 1..=10u64 {
            let prompt_text = if i == accept_at {
                format!("Prompt {i} with step-by-step reasoning.")
            } else {
                format!("Prompt {i} without the token.")
            };
            script.optimizer.push(ScriptItem::text(format!(
                "<analyse>weak</analyse><modification>tweak {i}</modification><prompt>{prompt_text}</prompt>"
            )));
            for q in 0..3 {
                script
                    .executor
                    .push(ScriptItem::text(format!("output {i}.{q}")));
            }
            let letters = if i == accept_at {
                accepting_round_letters()
            } else {
                rejecting_round_letters()
            };
            for letter in letters {
                script.evaluator.push(ScriptItem::text(letter));
            }
        }
        script
    }

    fn scripted_client(script: Script) -> LlmClient {
        LlmClient::over_script(
            Arc::new(ScriptedBackend::new(script)),
            RoleConfigs::scripted(),
            PriceTable::default(),
            Budget::default(),
        )
    }

    #[test]
    fn sampling_full_pool_is_a_permutation() {
        let t = template(3);
        let mut rng = rng_for_questions(1, 0);
        let mut drawn = sample_questions(&t, 3, &mut rng);
        drawn.sort();
        let mut expected: Vec<String> = t.entries.iter().map(|e| e.question.clone()).collect();
        expected.sort();
        assert_eq!(drawn, expected);
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_iteration() {
        let t = template(50);
        let a = sample_questions(&t, 3, &mut rng_for_questions(42, 7));
        let b = sample_questions(&t, 3, &mut rng_for_questions(42, 7));
        let c = sample_questions(&t, 3, &mut rng_for_questions(42, 8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_small_pool_draws_with_replacement() {
        let t = template(2);
        let drawn = sample_questions(&t, 3, &mut rng_for_questions(5, 1));
        assert_eq!(drawn.len(), 3);
        for q in &drawn {
            assert!(t.entries.iter().any(|e| &e.question == q));
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let t = template(3);
        let config = RunConfig {
            max_iterations: 0,
            ..RunConfig::default()
        };
        assert!(matches!(
            config.validate(&t),
            Err(RunError::Config(msg)) if msg.contains("max_iterations")
        ));
    }

    #[test]
    fn fixed_once_requires_large_enough_pool() {
        let t = template(2);
        let config = fixed_once_config(0);
        assert!(matches!(config.validate(&t), Err(RunError::Config(_))));
    }

    #[test]
    fn all_rejected_run_uses_eighty_three_calls() {
        let t = template(3);
        let client = scripted_client(scenario_script(99));
        let mut store = MemoryStore::default();
        let result = run(
            &t,
            &fixed_once_config(7),
            &MetaTemplates::default(),
            &client,
            &mut store,
        )
        .unwrap();
        assert_eq!(result.best.iteration, 0);
        assert!(!result.truncated);
        assert_eq!(result.trajectory.len(), 10);
        let ledger = client.ledger();
        assert_eq!(ledger.total_calls(), 83);
        assert_eq!(ledger.per_role().optimizer.calls, 10);
        assert_eq!(ledger.per_role().executor.calls, 33);
        assert_eq!(ledger.per_role().evaluator.calls, 40);
    }

    #[test]
    fn convergence_scenario_accepts_exactly_at_three() {
        let t = template(3);
        let client = scripted_client(scenario_script(3));
        let mut store = MemoryStore::default();
        let result = run(
            &t,
            &fixed_once_config(7),
            &MetaTemplates::default(),
            &client,
            &mut store,
        )
        .unwrap();
        assert_eq!(result.best.iteration, 3);
        assert!(result.best.text.contains("step-by-step"));
        let accepted: Vec<u64> = result
            .trajectory
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.index)
            .collect();
        assert_eq!(accepted, vec![3]);
        for record in &result.trajectory {
            assert_eq!(record.usage.optimizer.calls, 1);
            assert_eq!(record.usage.executor.calls, 3);
            assert_eq!(record.usage.evaluator.calls, 4);
            assert_eq!(record.status, IterationStatus::Completed);
        }
        // Candidates after the acceptance derive from the new incumbent.
        let record0 = &result.trajectory[4];
        assert_eq!(
            record0.candidate.as_ref().unwrap().parent_iteration,
            Some(3)
        );
    }

    #[test]
    fn identical_seeds_and_scripts_give_identical_trajectories() {
        let t = template(3);
        let run_once = || {
            let client = scripted_client(scenario_script(3));
            let mut store = MemoryStore::default();
            let result = run(
                &t,
                &fixed_once_config(21),
                &MetaTemplates::default(),
                &client,
                &mut store,
            )
            .unwrap();
            result
                .trajectory
                .iter()
                .map(|r| serde_json::to_string(r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn duplicate_proposal_marks_iteration_failed() {
        let t = template(3);
        let mut script = Script::default();
        for _ in 0..3 {
            script.executor.push(ScriptItem::text("seed output"));
        }
        // The proposal echoes the seed prompt: rejected without judging.
        script
            .optimizer
            .push(ScriptItem::text("<prompt>Seed prompt.</prompt>"));
        let client = scripted_client(script);
        let config = RunConfig {
            max_iterations: 1,
            ..fixed_once_config(0)
        };
        let mut store = MemoryStore::default();
        let result = run(&t, &config, &MetaTemplates::default(), &client, &mut store).unwrap();
        let record = &result.trajectory[0];
        assert_eq!(record.status, IterationStatus::FailedPropose);
        assert!(!record.accepted);
        assert!(record.error.as_deref().unwrap().contains("duplicates"));
        assert_eq!(result.best.iteration, 0);
    }

    #[test]
    fn budget_exhaustion_truncates_with_partial_trajectory() {
        let t = template(3);
        let client = LlmClient::over_script(
            Arc::new(ScriptedBackend::new(scenario_script(99))),
            RoleConfigs::scripted(),
            PriceTable::default(),
            Budget {
                // bootstrap (3) + two iterations (16) + iteration 3's proposal
                max_calls: Some(20),
                max_cost: None,
            },
        );
        let mut store = MemoryStore::default();
        let result = run(
            &t,
            &fixed_once_config(0),
            &MetaTemplates::default(),
            &client,
            &mut store,
        )
        .unwrap();
        assert!(result.truncated);
        assert_eq!(result.trajectory.len(), 3);
        let last = &result.trajectory[2];
        assert_eq!(last.status, IterationStatus::FailedExecute);
        assert!(last.error.as_deref().unwrap().contains("budget"));
        assert_eq!(client.ledger().total_calls(), 20);
    }

    #[test]
    fn resample_mode_reexecutes_incumbent() {
        let t = template(6);
        let mut script = Script::default();
        // Executor calls: bootstrap 3, iteration 1 candidate 3, iteration 2
        // incumbent re-execution 3 + candidate 3.
        for _ in 0..12 {
            script.executor.push(ScriptItem::text("output"));
        }
        for i in 1..=2 {
            script
                .optimizer
                .push(ScriptItem::text(format!("<prompt>candidate {i}</prompt>")));
        }
        for _ in 0..8 {
            script
                .evaluator
                .push(ScriptItem::text("<choose>B</choose>"));
        }
        let client = scripted_client(script);
        let config = RunConfig {
            max_iterations: 2,
            sampling_mode: SamplingMode::ResamplePerIteration,
            seed: 3,
            ..RunConfig::default()
        };
        let mut store = MemoryStore::default();
        let result = run(&t, &config, &MetaTemplates::default(), &client, &mut store).unwrap();
        assert_eq!(client.ledger().per_role().executor.calls, 12);
        assert_eq!(result.trajectory[0].usage.executor.calls, 3);
        assert_eq!(result.trajectory[1].usage.executor.calls, 6);
        // Fresh questions were drawn for iteration 2.
        assert_ne!(
            result.trajectory[0].questions,
            result.trajectory[1].questions
        );
    }

    /// Script for a 4-iteration resample-mode run accepting at `accept_at`:
    /// bootstrap 3 executor calls, then per iteration an incumbent
    /// re-execution (from iteration 2 on), one proposal, the candidate's
    /// execution, and four judge rounds.
    fn resample_script(accept_at: u64) -> Script {
        let mut script = Script::default();
        for i in 0..3 {
            script
                .executor
                .push(ScriptItem::text(format!("seed output {i}")));
        }
        for i in 1..=4u64 {
            if i > 1 {
                for q in 0..3 {
                    script
                        .executor
                        .push(ScriptItem::text(format!("incumbent rerun {i}.{q}")));
                }
            }
            script.optimizer.push(ScriptItem::text(format!(
                "<modification>change {i}</modification><prompt>candidate {i}</prompt>"
            )));
            for q in 0..3 {
                script
                    .executor
                    .push(ScriptItem::text(format!("output {i}.{q}")));
            }
            let letters = if i == accept_at {
                accepting_round_letters()
            } else {
                rejecting_round_letters()
            };
            for letter in letters {
                script.evaluator.push(ScriptItem::text(letter));
            }
        }
        script
    }

    #[test]
    fn resample_mode_resume_is_byte_identical() {
        use crate::config::FileConfig;
        use crate::trajectory::{RoleModels, RunDir, RunMeta, TRAJECTORY_FILE};

        let template_yaml = "prompt: Seed prompt.\nrequirements: Be helpful.\nfaq:\n  - question: question 0\n  - question: question 1\n  - question: question 2\n  - question: question 3\n  - question: question 4\n  - question: question 5\n";
        let config = RunConfig {
            max_iterations: 4,
            sampling_mode: SamplingMode::ResamplePerIteration,
            seed: 13,
            ..RunConfig::default()
        };
        let meta = RunMeta {
            config: FileConfig {
                run: config.clone(),
                ..FileConfig::default()
            },
            template_yaml: template_yaml.to_string(),
            models: RoleModels {
                optimizer: "scripted".into(),
                executor: "scripted".into(),
                evaluator: "scripted".into(),
            },
        };
        let task = load_template(template_yaml).unwrap();

        let full = tempfile::tempdir().unwrap();
        let mut full_dir = RunDir::create(full.path(), &meta).unwrap();
        run(
            &task,
            &config,
            &MetaTemplates::default(),
            &scripted_client(resample_script(2)),
            &mut full_dir,
        )
        .unwrap();
        let full_bytes = std::fs::read_to_string(full.path().join(TRAJECTORY_FILE)).unwrap();
        let lines: Vec<&str> = full_bytes.lines().collect();
        assert_eq!(lines.len(), 4);

        for k in 0..=3usize {
            let partial = tempfile::tempdir().unwrap();
            for file in ["run.json", "bootstrap.json"] {
                std::fs::copy(full.path().join(file), partial.path().join(file)).unwrap();
            }
            let mut truncated = lines[..k].join("\n");
            if k > 0 {
                truncated.push('\n');
            }
            std::fs::write(partial.path().join(TRAJECTORY_FILE), &truncated).unwrap();

            let outcome = resume(
                partial.path(),
                &MetaTemplates::default(),
                &scripted_client(resample_script(2)),
            )
            .unwrap();
            assert_eq!(outcome.best.iteration, 2, "resume after {k}");
            let resumed = std::fs::read_to_string(partial.path().join(TRAJECTORY_FILE)).unwrap();
            assert_eq!(resumed, full_bytes, "resume after {k}");
        }
    }

    #[test]
    fn randomized_slots_are_deterministic_per_seed() {
        let t = template(3);
        let config = RunConfig {
            max_iterations: 3,
            randomize_slots: true,
            ..fixed_once_config(31)
        };
        let run_once = || {
            // A slot-locked judge makes round winners depend entirely on the
            // slot assignment, exposing the RNG path in the records.
            let mut script = Script::default();
            for _ in 0..3 {
                script.executor.push(ScriptItem::text("seed output"));
            }
            for i in 1..=3 {
                script
                    .optimizer
                    .push(ScriptItem::text(format!("<prompt>candidate {i}</prompt>")));
                for q in 0..3 {
                    script
                        .executor
                        .push(ScriptItem::text(format!("output {i}.{q}")));
                }
                for _ in 0..4 {
                    script
                        .evaluator
                        .push(ScriptItem::text("<choose>A</choose>"));
                }
            }
            let client = scripted_client(script);
            let mut store = MemoryStore::default();
            let result = run(&t, &config, &MetaTemplates::default(), &client, &mut store).unwrap();
            result
                .trajectory
                .iter()
                .map(|r| serde_json::to_string(r).unwrap())
                .collect::<Vec<_>>()
        };
        let first = run_once();
        assert_eq!(first, run_once());
        // The slot schedule must actually vary across iterations for this
        // seed; with pure alternation every verdict would be a 2-2 tie.
        let verdicts: Vec<(u32, u32)> = first
            .iter()
            .map(|line| {
                let record: IterationRecord = serde_json::from_str(line).unwrap();
                let v = record.verdict.unwrap();
                (v.new_wins, v.incumbent_wins)
            })
            .collect();
        assert!(
            verdicts.iter().any(|&(n, i)| n != i),
            "expected at least one non-tie verdict, got {verdicts:?}"
        );
    }

    #[test]
    fn incumbent_provenance_holds_over_randomized_scripts() {
        use rand::RngExt;
        let t = template(4);
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let iterations = 6u64;
            let mut script = Script::default();
            for _ in 0..3 {
                script.executor.push(ScriptItem::text("seed output"));
            }
            let mut planned_accepts = Vec::new();
            for i in 1..=iterations {
                let kind = rng.random_range(0..4u32);
                match kind {
                    // Malformed proposal (consumes the one retry too).
                    0 => {
                        script.optimizer.push(ScriptItem::text("garbage"));
                        script.optimizer.push(ScriptItem::text("still garbage"));
                    }
                    // Duplicate of the seed prompt text.
                    1 => {
                        script
                            .optimizer
                            .push(ScriptItem::text("<prompt>Seed prompt.</prompt>"));
                    }
                    // Valid proposal, rejected or accepted by the judge.
                    _ => {
                        script.optimizer.push(ScriptItem::text(format!(
                            "<prompt>candidate number {i}</prompt>"
                        )));
                        for q in 0..3 {
                            script
                                .executor
                                .push(ScriptItem::text(format!("output {i}.{q}")));
                        }
                        let accept = kind == 3;
                        let letters = if accept {
                            accepting_round_letters()
                        } else {
                            rejecting_round_letters()
                        };
                        for letter in letters {
                            script.evaluator.push(ScriptItem::text(letter));
                        }
                        if accept {
                            planned_accepts.push(i);
                        }
                    }
                }
            }
            // Once a candidate is accepted, kind-1 iterations stop matching the
            // incumbent and fall through to executor/evaluator entries that may
            // not exist; those iterations simply fail, which is more coverage.
            let _ = planned_accepts;
            let client = scripted_client(script);
            let config = RunConfig {
                max_iterations: iterations,
                ..fixed_once_config(seed)
            };
            let mut store = MemoryStore::default();
            let result = match run(&t, &config, &MetaTemplates::default(), &client, &mut store) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let last_accepted = result.trajectory.iter().rev().find(|r| r.accepted);
            match last_accepted {
                Some(record) => {
                    assert_eq!(Some(&result.best), record.candidate.as_ref());
                }
                None => assert_eq!(result.best.iteration, 0),
            }
        }
    }
}
