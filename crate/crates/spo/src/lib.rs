//! Reference-free prompt optimization driven by a model's own outputs.
//!
//! Three chat-completion roles are wired into an optimize-execute-evaluate
//! loop: an optimizer model proposes a revised prompt, an executor model
//! answers sampled questions with it, and an evaluator model judges the new
//! outputs against the incumbent's outputs in position-counterbalanced
//! pairwise rounds. The better prompt survives; no gold answers are consulted
//! anywhere in the loop.
//!
//! Module map:
//!
//! - [`template`]: YAML task templates (seed prompt, requirements, question pool)
//! - [`llm`]: provider-agnostic chat client, retry policy, cost ledger, scripted backend
//! - [`optimizer`]: meta-prompt rendering and XML-tagged proposal parsing
//! - [`executor`]: batch execution and final-answer extraction
//! - [`evaluator`]: pairwise judging rounds and verdict aggregation
//! - [`runner`]: the iteration loop, question sampling, resume
//! - [`trajectory`]: per-iteration records, run directory layout, persistence
//! - [`bench`](mod@bench): offline scoring (accuracy vs. gold labels, pairwise win rates)
//! - [`cli`]: command-line entry points
//!
//! [`config`] binds a YAML settings file to all of the above; the `spo`
//! binary is a thin layer over these modules.

pub mod bench;
pub mod cli;
pub mod config;
pub mod evaluator;
pub mod executor;
pub mod llm;
pub mod optimizer;
pub mod runner;
pub mod template;
pub mod trajectory;
