//! Token and dollar accounting for every chat-completion call.
//!
//! The ledger is the single place where budget caps are enforced: every call
//! is checked against `max_calls` and `max_cost` before it reaches a backend,
//! so a runaway loop is structurally impossible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LlmError, LlmResponse, LlmRole};

/// Token counts of a single response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }
}

/// Accumulated calls, tokens, and cost for one role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
}

impl UsageTotals {
    fn add(&mut self, usage: Usage, cost: f64) {
        self.calls += 1;
        self.prompt_tokens += usage.prompt_tokens;
        self.completion_tokens += usage.completion_tokens;
        self.cost += cost;
    }

    pub fn merge(&mut self, other: &UsageTotals) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.cost += other.cost;
    }
}

/// Per-role totals with a fixed field order, so serialization is stable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleTotals {
    pub optimizer: UsageTotals,
    pub executor: UsageTotals,
    pub evaluator: UsageTotals,
}

impl RoleTotals {
    pub fn get(&self, role: LlmRole) -> &UsageTotals {
        match role {
            LlmRole::Optimizer => &self.optimizer,
            LlmRole::Executor => &self.executor,
            LlmRole::Evaluator => &self.evaluator,
        }
    }

    pub fn get_mut(&mut self, role: LlmRole) -> &mut UsageTotals {
        match role {
            LlmRole::Optimizer => &mut self.optimizer,
            LlmRole::Executor => &mut self.executor,
            LlmRole::Evaluator => &mut self.evaluator,
        }
    }

    pub fn merge(&mut self, other: &RoleTotals) {
        self.optimizer.merge(&other.optimizer);
        self.executor.merge(&other.executor);
        self.evaluator.merge(&other.evaluator);
    }

    pub fn total_calls(&self) -> u64 {
        self.optimizer.calls + self.executor.calls + self.evaluator.calls
    }

    pub fn total_cost(&self) -> f64 {
        self.optimizer.cost + self.executor.cost + self.evaluator.cost
    }
}

/// Dollars per 1000 tokens for one model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_price_per_1k: f64,
    pub output_price_per_1k: f64,
}

/// Prices keyed by model id. A BTreeMap keeps serialization order stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, ModelPrice>);

impl PriceTable {
    pub fn get(&self, model_id: &str) -> Option<ModelPrice> {
        self.0.get(model_id).copied()
    }

    pub fn insert(&mut self, model_id: impl Into<String>, price: ModelPrice) {
        self.0.insert(model_id.into(), price);
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.0.contains_key(model_id)
    }

    pub fn cost_of(&self, model_id: &str, usage: Usage) -> Option<f64> {
        self.get(model_id).map(|p| call_cost(p, usage))
    }
}

pub fn call_cost(price: ModelPrice, usage: Usage) -> f64 {
    usage.prompt_tokens as f64 / 1000.0 * price.input_price_per_1k
        + usage.completion_tokens as f64 / 1000.0 * price.output_price_per_1k
}

/// Hard caps on a run. `None` means unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub max_cost: Option<f64>,
    pub max_calls: Option<u64>,
}

/// Snapshot of ledger totals, suitable for reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub per_role: RoleTotals,
    pub total_calls: u64,
    pub retries: u64,
    pub total_cost: f64,
}

/// Mutable accounting state for a run.
#[derive(Debug, Clone)]
pub struct CostLedger {
    per_role: RoleTotals,
    price_table: PriceTable,
    budget: Budget,
    total_calls: u64,
    retries: u64,
    total_cost: f64,
}

impl CostLedger {
    pub fn new(price_table: PriceTable, budget: Budget) -> Self {
        Self {
            per_role: RoleTotals::default(),
            price_table,
            budget,
            total_calls: 0,
            retries: 0,
            total_cost: 0.0,
        }
    }

    /// Record a successful response under `role` and return the running total
    /// cost. Fails when the model has no price entry.
    pub fn record_and_total(&mut self, resp: &LlmResponse, role: LlmRole) -> Result<f64, LlmError> {
        let price = self
            .price_table
            .get(&resp.model_id)
            .ok_or_else(|| LlmError::UnknownModelPrice(resp.model_id.clone()))?;
        let cost = call_cost(price, resp.usage);
        self.per_role.get_mut(role).add(resp.usage, cost);
        self.total_calls += 1;
        self.total_cost += cost;
        Ok(self.total_cost)
    }

    /// Failed attempts are tallied here, never under `total_calls`.
    pub fn record_failed_attempt(&mut self) {
        self.retries += 1;
    }

    /// Error when one more call would breach a cap.
    pub fn check_budget(&self) -> Result<(), LlmError> {
        if let Some(max_calls) = self.budget.max_calls {
            if self.total_calls >= max_calls {
                return Err(LlmError::BudgetExceeded {
                    reason: format!("call cap reached ({max_calls} calls)"),
                });
            }
        }
        if let Some(max_cost) = self.budget.max_cost {
            if self.total_cost >= max_cost {
                return Err(LlmError::BudgetExceeded {
                    reason: format!(
                        "cost cap reached (${:.6} of ${:.6})",
                        self.total_cost, max_cost
                    ),
                });
            }
        }
        Ok(())
    }

    /// Fold totals from an earlier process into this ledger so budget caps
    /// span a resumed run.
    pub fn absorb_prior(&mut self, prior: &RoleTotals) {
        self.per_role.merge(prior);
        self.total_calls += prior.total_calls();
        self.total_cost += prior.total_cost();
    }

    pub fn per_role(&self) -> &RoleTotals {
        &self.per_role
    }

    pub fn price_table(&self) -> &PriceTable {
        &self.price_table
    }

    pub fn total_calls(&self) -> u64 {
        self.total_calls
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn retries(&self) -> u64 {
        self.retries
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            per_role: self.per_role,
            total_calls: self.total_calls,
            retries: self.retries,
            total_cost: self.total_cost,
        }
    }
}
