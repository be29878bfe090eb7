//! Command-line surface: optimize, resume, score, compare, inspect, cost-report.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 budget
//! truncation (partial results were written). Diagnostics go to stderr with
//! `error:` / `warning:` prefixes.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::bench::{self, LabeledSet, Normalizer};
use crate::config::FileConfig;
use crate::evaluator;
use crate::executor::AnswerFormat;
use crate::llm::http::HttpBackend;
use crate::llm::scripted::{Script, ScriptedBackend};
use crate::llm::LlmClient;
use crate::optimizer::PromptCandidate;
use crate::runner::{self, MetaTemplates, OptimizationResult};
use crate::template::{self, TaskTemplate};
use crate::trajectory::{
    cost_report, CostReport, IterationRecord, IterationStatus, RoleModels, RunDir, RunMeta,
};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_TRUNCATED: u8 = 3;

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(
    name = "spo",
    version,
    about = "Self-supervised prompt optimization: improve a task prompt using only model outputs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization loop from a task template.
    Optimize(OptimizeArgs),
    /// Continue an interrupted run directory until max_iterations.
    Resume(ResumeArgs),
    /// Score a prompt's accuracy against a gold-labeled question set.
    Score(ScoreArgs),
    /// Judge two prompts head-to-head over a question list.
    Compare(CompareArgs),
    /// Summarize a run directory's trajectory.
    Inspect(InspectArgs),
    /// Aggregate token and dollar accounting for a run directory.
    CostReport(CostReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Live,
    Scripted,
}

#[derive(Args)]
struct BackendArgs {
    /// Transport: live HTTP or a scripted response file.
    #[arg(long, value_enum, default_value_t = BackendKind::Live)]
    backend: BackendKind,
    /// Scripted responses (YAML), required with --backend scripted.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Log request and response bodies to stderr.
    #[arg(long)]
    log_llm: bool,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Task template YAML (prompt, requirements, faq).
    #[arg(short, long)]
    template: PathBuf,
    /// Run configuration YAML; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output run directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Draw judge slot assignments from the seeded RNG instead of the
    /// deterministic A,B,A,B alternation.
    #[arg(long)]
    randomize_slots: bool,
    /// Send the prompt as the system message instead of prepending it to the
    /// question.
    #[arg(long)]
    as_system: bool,
    /// Replace the built-in optimization meta-prompt.
    #[arg(long)]
    optimize_template: Option<PathBuf>,
    /// Replace the built-in evaluation meta-prompt.
    #[arg(long)]
    eval_template: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ResumeArgs {
    /// Run directory produced by `optimize`.
    run_dir: PathBuf,
    #[arg(long)]
    optimize_template: Option<PathBuf>,
    #[arg(long)]
    eval_template: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PromptSource {
    /// Read the prompt from a text file.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Use best_prompt.txt from a run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    prompt: PromptSource,
    /// JSON-lines file of {"question", "gold"} items.
    #[arg(long)]
    labeled_set: PathBuf,
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Matching rules for extracted answers.
    #[arg(long, value_enum, default_value_t = NormalizerArg::Standard)]
    normalizer: NormalizerArg,
    /// Write the full per-item report to this JSON file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormalizerArg {
    Standard,
    Math,
}

#[derive(Args)]
struct CompareArgs {
    /// Text file holding prompt A.
    #[arg(long)]
    prompt_a: PathBuf,
    /// Text file holding prompt B.
    #[arg(long)]
    prompt_b: PathBuf,
    /// JSON-lines file of {"question"} items.
    #[arg(long)]
    questions: PathBuf,
    /// Requirement text shown to the judge.
    #[arg(long, default_value = "")]
    requirements: String,
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eval_template: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct InspectArgs {
    run_dir: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CostReportArgs {
    run_dir: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Entry point for the `spo` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Optimize(args) => optimize(args),
        Command::Resume(args) => resume(args),
        Command::Score(args) => score(args),
        Command::Compare(args) => compare(args),
        Command::Inspect(args) => inspect(args),
        Command::CostReport(args) => cost_report_cmd(args),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    Ok(match path {
        Some(p) => FileConfig::from_path(p)?,
        None => FileConfig::default(),
    })
}

fn build_client(backend: &BackendArgs, config: &FileConfig) -> CliResult<LlmClient> {
    let client = match backend.backend {
        BackendKind::Scripted => {
            let script_path = backend
                .script
                .as_deref()
                .ok_or("--backend scripted requires --script <path>")?;
            let script = Script::from_path(script_path)?;
            LlmClient::over_script(
                Arc::new(ScriptedBackend::new(script)),
                config.role_configs(true),
                config.pricing.clone(),
                config.run.budget,
            )
        }
        BackendKind::Live => {
            let roles = config.role_configs(false);
            config.validate_live_pricing(&roles)?;
            let endpoints = config.resolve_endpoints()?;
            LlmClient::new(
                Arc::new(HttpBackend::new(endpoints)),
                roles,
                config.pricing.clone(),
                config.run.budget,
            )
        }
    };
    Ok(client.with_request_logging(backend.log_llm))
}

fn load_meta_templates(
    optimize: Option<&Path>,
    evaluate: Option<&Path>,
) -> CliResult<MetaTemplates> {
    let mut templates = MetaTemplates::default();
    if let Some(path) = optimize {
        templates.optimize = std::fs::read_to_string(path)?;
    }
    if let Some(path) = evaluate {
        templates.evaluate = std::fs::read_to_string(path)?;
    }
    Ok(templates)
}

fn print_template_warnings(
    template: &TaskTemplate,
    load_warnings: &[template::Warning],
    sample_count: usize,
) {
    for warning in load_warnings {
        eprintln!("warning: {warning}");
    }
    for warning in template::validate_template(template, sample_count) {
        eprintln!("warning: {warning}");
    }
}

fn finish_run(dir: &RunDir, result: &OptimizationResult) -> CliResult<u8> {
    dir.write_best_prompt(&result.best.text)?;
    let bootstrap = dir.load_bootstrap()?;
    let records = dir.load_records()?;
    dir.write_cost_report(&cost_report(bootstrap.as_ref(), &records))?;

    let accepted = result.trajectory.iter().filter(|r| r.accepted).count();
    println!(
        "{} iterations, {} accepted; best prompt from iteration {}",
        result.trajectory.len(),
        accepted,
        result.best.iteration
    );
    println!(
        "calls: {}  cost: ${:.6}  (written to {})",
        result.ledger.total_calls,
        result.ledger.total_cost,
        dir.dir().display()
    );
    if result.truncated {
        eprintln!("warning: budget exhausted; the run directory holds a partial trajectory");
        return Ok(EXIT_TRUNCATED);
    }
    Ok(EXIT_OK)
}

fn optimize(args: OptimizeArgs) -> CliResult<u8> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if args.randomize_slots {
        config.run.randomize_slots = true;
    }
    if args.as_system {
        config.run.as_system = true;
    }
    let template_yaml = std::fs::read_to_string(&args.template)?;
    let (task, load_warnings) = template::load_template_with_warnings(&template_yaml)?;
    print_template_warnings(&task, &load_warnings, config.run.sample_count);
    let templates = load_meta_templates(
        args.optimize_template.as_deref(),
        args.eval_template.as_deref(),
    )?;
    let client = build_client(&args.backend, &config)?;

    let roles = client.roles();
    let meta = RunMeta {
        config: config.clone(),
        template_yaml,
        models: RoleModels {
            optimizer: roles.optimizer.model.clone(),
            executor: roles.executor.model.clone(),
            evaluator: roles.evaluator.model.clone(),
        },
    };
    let mut dir = RunDir::create(&args.out, &meta)?;
    let result = runner::run(&task, &config.run, &templates, &client, &mut dir)?;
    finish_run(&dir, &result)
}

fn resume(args: ResumeArgs) -> CliResult<u8> {
    let dir = RunDir::open_existing(&args.run_dir)?;
    let meta = dir.load_meta()?;
    let templates = load_meta_templates(
        args.optimize_template.as_deref(),
        args.eval_template.as_deref(),
    )?;
    let client = build_client(&args.backend, &meta.config)?;
    let result = runner::resume(&args.run_dir, &templates, &client)?;
    finish_run(&dir, &result)
}

fn effective_answer_format(config: &FileConfig, run_dir: Option<&Path>) -> CliResult<AnswerFormat> {
    if let Some(fmt) = &config.run.answer_format {
        return Ok(fmt.clone());
    }
    if let Some(dir) = run_dir {
        let meta = RunDir::open_existing(dir)?.load_meta()?;
        if let Some(fmt) = &meta.config.run.answer_format {
            return Ok(fmt.clone());
        }
        if let Some(fmt) = template::load_template(&meta.template_yaml)?.answer_format {
            return Ok(fmt);
        }
    }
    Ok(AnswerFormat::XmlTag {
        tag: "answer".into(),
    })
}

fn read_prompt_file(path: &Path) -> CliResult<PromptCandidate> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(format!("prompt file {} is empty", path.display()).into());
    }
    Ok(PromptCandidate::seed(text.trim_end()))
}

fn score(args: ScoreArgs) -> CliResult<u8> {
    let config = load_config(args.config.as_deref())?;
    let prompt = match (&args.prompt.prompt_file, &args.prompt.run_dir) {
        (Some(file), None) => read_prompt_file(file)?,
        (None, Some(dir)) => read_prompt_file(&dir.join(crate::trajectory::BEST_PROMPT_FILE))?,
        _ => unreachable!("clap group enforces exactly one source"),
    };
    let set = LabeledSet::from_path(&args.labeled_set)?;
    let format = effective_answer_format(&config, args.prompt.run_dir.as_deref())?;
    let normalizer = match args.normalizer {
        NormalizerArg::Standard => Normalizer::Standard,
        NormalizerArg::Math => Normalizer::Math,
    };
    let client = build_client(&args.backend, &config)?;
    let report = bench::score_accuracy(&prompt, &set, &format, normalizer, &client)?;

    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "accuracy {:.3} ({} of {} correct)",
            report.accuracy, report.correct, report.total
        );
        for (i, item) in report.items.iter().enumerate() {
            let mark = if item.correct { "ok  " } else { "MISS" };
            println!(
                "{mark} {}: gold={:?} extracted={:?}",
                i + 1,
                item.gold,
                item.extracted
            );
        }
    }
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct QuestionLine {
    question: String,
}

fn load_questions(path: &Path) -> CliResult<Vec<String>> {
    let raw = std::fs::read_to_string(path)?;
    let mut questions = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: QuestionLine = serde_json::from_str(line)
            .map_err(|e| format!("malformed question file at line {}: {e}", i + 1))?;
        questions.push(parsed.question);
    }
    if questions.is_empty() {
        return Err("question file is empty".into());
    }
    Ok(questions)
}

fn compare(args: CompareArgs) -> CliResult<u8> {
    let config = load_config(args.config.as_deref())?;
    let prompt_a = read_prompt_file(&args.prompt_a)?;
    let prompt_b = read_prompt_file(&args.prompt_b)?;
    let questions = load_questions(&args.questions)?;
    let eval_template = match &args.eval_template {
        Some(path) => std::fs::read_to_string(path)?,
        None => evaluator::EVALUATE_TEMPLATE.to_string(),
    };
    let client = build_client(&args.backend, &config)?;
    let report = bench::pairwise_winrate(
        &prompt_a,
        &prompt_b,
        &questions,
        &args.requirements,
        &eval_template,
        &client,
    )?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "A wins {}  B wins {}  invalid {}",
            report.wins_a, report.wins_b, report.invalid
        );
        match report.win_rate_a {
            Some(rate) => println!("win rate A over decided pairs: {rate:.3}"),
            None => println!("win rate A: undecided (no agreeing pair)"),
        }
    }
    Ok(EXIT_OK)
}

fn status_label(status: IterationStatus) -> &'static str {
    match status {
        IterationStatus::Completed => "completed",
        IterationStatus::FailedPropose => "failed-propose",
        IterationStatus::FailedExecute => "failed-execute",
        IterationStatus::FailedEvaluate => "failed-evaluate",
    }
}

fn one_line(text: &str, max: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max {
        flat
    } else {
        let truncated: String = flat.chars().take(max.saturating_sub(1)).collect();
        format!("{truncated}…")
    }
}

/// Render the per-iteration table for a trajectory.
pub fn render_inspect_table(records: &[IterationRecord]) -> String {
    if records.is_empty() {
        return "0 iterations".to_string();
    }
    let accepted = records.iter().filter(|r| r.accepted).count();
    let mut out = format!("{} iterations, {accepted} accepted\n", records.len());
    out.push_str("iter  accepted  status           rounds(N-I-X)  cum.cost($)  note\n");
    let mut cumulative = 0.0;
    for record in records {
        cumulative += record.usage.total_cost();
        let tally = match &record.verdict {
            Some(v) => format!("{}-{}-{}", v.new_wins, v.incumbent_wins, v.invalid),
            None => "-".to_string(),
        };
        let note = record
            .error
            .as_deref()
            .map(|e| one_line(e, 48))
            .or_else(|| {
                record
                    .candidate
                    .as_ref()
                    .and_then(|c| c.modification.as_deref())
                    .map(|m| one_line(m, 48))
            })
            .unwrap_or_default();
        out.push_str(&format!(
            "{:>4}  {:<8}  {:<15}  {:<13}  {:<11.6}  {}\n",
            record.index,
            if record.accepted { "yes" } else { "no" },
            status_label(record.status),
            tally,
            cumulative,
            note
        ));
    }
    out
}

fn inspect(args: InspectArgs) -> CliResult<u8> {
    let dir = RunDir::open_existing(&args.run_dir)?;
    let records = dir.load_records()?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&records)?);
    } else {
        print!("{}", render_inspect_table(&records));
    }
    Ok(EXIT_OK)
}

/// Render the cost table for a run.
pub fn render_cost_table(report: &CostReport) -> String {
    let mut out = String::from("role       calls  prompt_tok  completion_tok  cost($)\n");
    for (name, totals) in [
        ("optimizer", &report.per_role.optimizer),
        ("executor", &report.per_role.executor),
        ("evaluator", &report.per_role.evaluator),
    ] {
        out.push_str(&format!(
            "{:<9}  {:>5}  {:>10}  {:>14}  {:.6}\n",
            name, totals.calls, totals.prompt_tokens, totals.completion_tokens, totals.cost
        ));
    }
    out.push_str(&format!(
        "{:<9}  {:>5}  {:>10}  {:>14}  {:.6}\n",
        "total",
        report.total_calls,
        report.per_role.optimizer.prompt_tokens
            + report.per_role.executor.prompt_tokens
            + report.per_role.evaluator.prompt_tokens,
        report.per_role.optimizer.completion_tokens
            + report.per_role.executor.completion_tokens
            + report.per_role.evaluator.completion_tokens,
        report.total_cost
    ));
    out
}

fn cost_report_cmd(args: CostReportArgs) -> CliResult<u8> {
    let dir = RunDir::open_existing(&args.run_dir)?;
    let report = cost_report(dir.load_bootstrap()?.as_ref(), &dir.load_records()?);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render_cost_table(&report));
    }
    Ok(EXIT_OK)
}
