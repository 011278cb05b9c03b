//! Command-line front end: `run`, `parse`, `plan`, `eval`, `replay` and
//! `report`.

mod stats;

use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use automl_core::codegen::TaskFamily;
use automl_core::gateway::{ChatBackend, Gateway, GatewayError};
use automl_core::knowledge::SourceId;
use automl_core::metrics::{designated_metric, grade, NpsMetric};
use automl_core::orchestrator::{
    self, create_run_dir, BackendChoice, ConfigError, ConfigFile, OrchestratorError, RunConfig, RunOutcome, RunSummary,
};
use automl_core::requirements::{parse_requirements, Direction, MetricConstraint, RawInstruction, UserRequirements};
use automl_core::sandbox::run_pipeline;
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

/// Exit statuses. Usage errors exit with 2 through clap.
mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const FEEDBACK: u8 = 4;
    pub const TERMINAL_FAILURE: u8 = 5;
    pub const BACKEND: u8 = 6;
}

const MAX_CLARIFICATIONS: usize = 2;

#[derive(Parser)]
#[command(name = "automl-agent", version, about = "Multi-agent LLM orchestration for full-pipeline AutoML")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline for one instruction.
    Run {
        #[command(flatten)]
        input: InstructionArgs,
        #[command(flatten)]
        opts: RunArgs,
        /// Never prompt for clarification, even on a terminal.
        #[arg(long)]
        no_interactive: bool,
    },
    /// Parse an instruction into the requirement document and print it.
    Parse {
        #[command(flatten)]
        input: InstructionArgs,
        #[command(flatten)]
        opts: RunArgs,
    },
    /// Verify, parse, retrieve and print the first plan set.
    Plan {
        #[command(flatten)]
        input: InstructionArgs,
        #[command(flatten)]
        opts: RunArgs,
    },
    /// Execute an existing pipeline script in the sandbox and grade it.
    Eval {
        /// Script to execute.
        code: PathBuf,
        /// Constraint such as `accuracy>=0.98` or `inference_time<=50ms`; repeatable.
        #[arg(long = "constraint")]
        constraints: Vec<String>,
        /// Requirement document whose constraints are added to `--constraint`.
        #[arg(long)]
        requirements: Option<PathBuf>,
        /// Metric used for the normalized performance score; defaults to the
        /// task family's designated metric.
        #[arg(long)]
        metric: Option<String>,
        #[command(flatten)]
        opts: RunArgs,
    },
    /// Re-run a recorded run against its transcript.
    Replay {
        /// Run directory or transcript file.
        source: PathBuf,
        /// Instruction file; defaults to `instruction.txt` next to the transcript.
        #[arg(long)]
        instruction_file: Option<PathBuf>,
        #[command(flatten)]
        opts: RunArgs,
    },
    /// Mean and standard deviation of SR, NPS and CS over run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct InstructionArgs {
    /// Instruction text.
    #[arg(conflicts_with = "instruction_file")]
    instruction: Option<String>,
    /// File holding the instruction text.
    #[arg(long, short = 'f')]
    instruction_file: Option<PathBuf>,
}

impl InstructionArgs {
    fn read(&self) -> anyhow::Result<String> {
        match (&self.instruction, &self.instruction_file) {
            (Some(text), _) => Ok(text.clone()),
            (None, Some(path)) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())),
            (None, None) => Cli::command()
                .error(ErrorKind::MissingRequiredArgument, "an instruction or --instruction-file is required")
                .exit(),
        }
    }
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of plans per round.
    #[arg(long)]
    plans: Option<i64>,
    /// Number of candidate models per plan.
    #[arg(long)]
    topk: Option<i64>,
    /// Upper bound on planning rounds.
    #[arg(long)]
    max_rounds: Option<i64>,
    /// Grading mode: free or aware.
    #[arg(long)]
    mode: Option<String>,
    /// Task family, e.g. tabular_classification.
    #[arg(long)]
    task: Option<String>,
    /// Serve backend calls from a JSONL mock script.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Sandbox timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Root directory for run artifacts.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Skeleton template directory.
    #[arg(long)]
    skeletons: Option<PathBuf>,
    /// Interpreter command line for generated scripts, e.g. "python3" or "sh".
    #[arg(long)]
    interpreter: Option<String>,
    /// Concurrent backend calls.
    #[arg(long)]
    workers: Option<i64>,
    /// Enable a knowledge source (web_search, arxiv, kaggle, paperswithcode); repeatable.
    #[arg(long = "source")]
    enable_sources: Vec<String>,
    /// Disable a knowledge source; repeatable.
    #[arg(long = "no-source")]
    disable_sources: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
            let file: ConfigFile =
                toml::from_str(&text).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
            cfg.apply_file(file)?;
        }
        let flags = ConfigFile {
            plans: self.plans,
            top_k: self.topk,
            max_rounds: self.max_rounds,
            mode: self.mode.clone(),
            task: self.task.clone(),
            workers: self.workers,
            skeletons: self.skeletons.clone(),
            run_root: self.workdir.clone(),
            ..ConfigFile::default()
        };
        cfg.apply_file(flags).map_err(|e| ConfigError::new(flag_name(&e.field), e.message))?;
        if let Some(secs) = self.timeout {
            if !secs.is_finite() || secs <= 0.0 {
                return Err(ConfigError::new("--timeout", format!("must be a positive number of seconds, got {secs}")));
            }
            cfg.sandbox.timeout = Duration::from_secs_f64(secs);
        }
        if let Some(cmd) = &self.interpreter {
            cfg.sandbox.interpreter = cmd.split_whitespace().map(String::from).collect();
        }
        for (names, enabled) in [(&self.enable_sources, true), (&self.disable_sources, false)] {
            for name in names {
                let id: SourceId = name.parse().map_err(|e: String| ConfigError::new("--source", e))?;
                cfg.sources.iter_mut().filter(|s| s.id == id).for_each(|s| s.enabled = enabled);
            }
        }
        if let Some(script) = &self.mock_script {
            cfg.backend = BackendChoice::Mock { script: script.clone() };
        }
        cfg.validate().map_err(|e| ConfigError::new(flag_name(&e.field), e.message))?;
        Ok(cfg)
    }
}

fn flag_name(field: &str) -> String {
    let flag = match field {
        "plans" => "--plans",
        "top_k" => "--topk",
        "max_rounds" => "--max-rounds",
        "mode" => "--mode",
        "task" => "--task",
        "workers" => "--workers",
        other => return other.to_string(),
    };
    flag.to_string()
}

/// Error carrying the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        let error = error.into();
        let code = if error.downcast_ref::<ConfigError>().is_some() {
            exit::CONFIG
        } else if let Some(e) = error.downcast_ref::<OrchestratorError>() {
            match e {
                OrchestratorError::Config(_) => exit::CONFIG,
                _ if e.gateway_error().is_some() => exit::BACKEND,
                _ => exit::FAILURE,
            }
        } else if error.downcast_ref::<GatewayError>().is_some() {
            exit::BACKEND
        } else {
            exit::FAILURE
        };
        Failure { code, error }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run { input, opts, no_interactive } => cmd_run(&input.read()?, &opts, no_interactive),
        Command::Parse { input, opts } => cmd_parse(&input.read()?, &opts),
        Command::Plan { input, opts } => cmd_plan(&input.read()?, &opts),
        Command::Eval { code, constraints, requirements, metric, opts } => {
            cmd_eval(&code, &constraints, requirements.as_deref(), metric, &opts)
        }
        Command::Replay { source, instruction_file, opts } => cmd_replay(&source, instruction_file, &opts),
        Command::Report { runs } => cmd_report(&runs),
    }
}

fn backend(cfg: &RunConfig) -> Result<Arc<dyn ChatBackend>, ConfigError> {
    cfg.backend.build()
}

fn print_outcome(summary: &RunSummary) -> u8 {
    println!("run directory: {}", summary.run_dir.display());
    println!("backend calls: {}", summary.backend_calls);
    match &summary.outcome {
        RunOutcome::Completed { round, artifact, report } => {
            println!("outcome: completed in round {round} with plan {}", artifact.plan_id);
            if let Some(endpoint) = &artifact.endpoint {
                println!("endpoint: {endpoint}");
            }
            println!("SR: {:?}\nNPS: {:?}\nCS: {:?}", report.sr, report.nps, report.cs);
            exit::OK
        }
        RunOutcome::Feedback(feedback) => {
            println!("outcome: feedback\n{}", feedback.message);
            for item in &feedback.missing_items {
                println!("- missing: {item}");
            }
            exit::FEEDBACK
        }
        RunOutcome::TerminalFailure { rounds, .. } => {
            println!("outcome: terminal failure after {rounds} round(s)");
            println!("rationale: {}", summary.run_dir.join("rationale.md").display());
            exit::TERMINAL_FAILURE
        }
    }
}

fn cmd_run(instruction: &str, opts: &RunArgs, no_interactive: bool) -> Result<u8, Failure> {
    let cfg = opts.config()?;
    let interactive = !no_interactive && std::io::stdin().is_terminal();
    let mut text = instruction.to_string();
    let mut turns = 0;
    loop {
        let summary = orchestrator::run(&RawInstruction::new(text.clone()), &cfg, backend(&cfg)?)?;
        let code = print_outcome(&summary);
        let RunOutcome::Feedback(_) = &summary.outcome else { return Ok(code) };
        if !interactive || turns == MAX_CLARIFICATIONS {
            return Ok(code);
        }
        turns += 1;
        print!("clarification ({turns}/{MAX_CLARIFICATIONS}, empty to stop): ");
        std::io::stdout().flush()?;
        let mut answer = String::new();
        std::io::stdin().lock().read_line(&mut answer)?;
        if answer.trim().is_empty() {
            return Ok(code);
        }
        text = format!("{}\n{}", text.trim_end(), answer.trim());
    }
}

fn cmd_parse(instruction: &str, opts: &RunArgs) -> Result<u8, Failure> {
    let cfg = opts.config()?;
    let gateway = Gateway::new(backend(&cfg)?);
    let parsed = parse_requirements(&RawInstruction::new(instruction), &gateway, cfg.parse)?;
    for warning in &parsed.warnings {
        eprintln!("warning: {warning}");
    }
    match writeln!(std::io::stdout().lock(), "{}", parsed.requirements.to_pretty_json()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(exit::OK),
    }
}

fn cmd_plan(instruction: &str, opts: &RunArgs) -> Result<u8, Failure> {
    let cfg = opts.config()?;
    let summary = orchestrator::plan_only(&RawInstruction::new(instruction), &cfg, backend(&cfg)?)?;
    if let RunOutcome::Feedback(_) = summary.outcome {
        return Ok(print_outcome(&summary));
    }
    for set in &summary.plan_sets {
        for plan in &set.plans {
            println!("## Plan {} (round {})\n{}\n", plan.id, set.round, plan.text);
        }
    }
    Ok(exit::OK)
}

/// Parses `NAME OP VALUE[UNITS]` with OP one of `>=`, `<=`, `≥`, `≤`.
fn parse_constraint(spec: &str) -> anyhow::Result<MetricConstraint> {
    let ops = [(">=", Direction::AtLeast), ("<=", Direction::AtMost), ("≥", Direction::AtLeast), ("≤", Direction::AtMost)];
    let (pos, op, direction) = ops
        .iter()
        .filter_map(|(op, d)| spec.find(op).map(|p| (p, *op, *d)))
        .min_by_key(|(p, _, _)| *p)
        .ok_or_else(|| anyhow!("constraint {spec:?}: expected NAME>=VALUE or NAME<=VALUE"))?;
    let name = spec[..pos].trim();
    let rest = spec[pos + op.len()..].trim();
    let split = rest.find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))).unwrap_or(rest.len());
    let value: f64 = rest[..split].parse().map_err(|_| anyhow!("constraint {spec:?}: bad number {:?}", &rest[..split]))?;
    if name.is_empty() || !value.is_finite() {
        bail!("constraint {spec:?}: needs a metric name and a finite value");
    }
    let mut c = MetricConstraint::new(name, value).with_direction(direction);
    let units = rest[split..].trim();
    if !units.is_empty() {
        c = c.with_units(units);
    }
    Ok(c)
}

fn cmd_eval(
    code: &Path,
    constraint_specs: &[String],
    requirements: Option<&Path>,
    metric: Option<String>,
    opts: &RunArgs,
) -> Result<u8, Failure> {
    let cfg = opts.config()?;
    let source = std::fs::read_to_string(code).with_context(|| format!("reading {}", code.display()))?;
    let mut constraints = constraint_specs.iter().map(|s| parse_constraint(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut family = cfg.task_family;
    if let Some(path) = requirements {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: UserRequirements = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        constraints.extend(r.constraints());
        family = family.or_else(|| TaskFamily::infer(&r));
    }
    let nps_metric = match (metric, family) {
        (Some(name), _) => NpsMetric::inferred(name),
        (None, Some(f)) => designated_metric(f),
        (None, None) => return Err(ConfigError::new("--task", "needed to choose the NPS metric (or pass --metric)").into()),
    };
    let mut sandbox = cfg.sandbox.clone();
    sandbox.workdir = create_run_dir(&cfg.run_root)?.join("sandbox");
    let result = run_pipeline(&source, &sandbox)?;
    let report = grade(&result, &constraints, cfg.mode, &nps_metric);
    println!("sandbox: {}", sandbox.workdir.display());
    println!("exit code: {}{}", result.exit_code, if result.timed_out { " (timed out)" } else { "" });
    for c in &report.constraint_results {
        let observed = c.observed.map(|v| format!("{v}")).unwrap_or_else(|| "missing".into());
        println!("constraint {}: observed {observed}, {}", c.constraint.describe(), if c.satisfied { "met" } else { "not met" });
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    println!("mode: {}", report.mode);
    println!("SR: {:?}\nNPS: {:?}\nCS: {:?}", report.sr, report.nps, report.cs);
    let report_path = sandbox.workdir.with_file_name("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(exit::OK)
}

fn cmd_replay(source: &Path, instruction_file: Option<PathBuf>, opts: &RunArgs) -> Result<u8, Failure> {
    let transcript = if source.is_dir() { source.join("transcript.jsonl") } else { source.to_path_buf() };
    let instruction_file = instruction_file.unwrap_or_else(|| transcript.with_file_name("instruction.txt"));
    let text = std::fs::read_to_string(&instruction_file)
        .with_context(|| format!("reading {}", instruction_file.display()))?;
    let cfg = opts.config()?;
    let summary = orchestrator::replay(&transcript, &RawInstruction::new(text), &cfg)?;
    Ok(print_outcome(&summary))
}

fn cmd_report(runs: &[PathBuf]) -> Result<u8, Failure> {
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        rows.push(stats::Scores::from_report(&value));
    }
    let table = stats::summarize(&rows);
    println!("runs: {} (completed: {})", rows.len(), rows.iter().filter(|r| r.completed).count());
    for (name, s) in table {
        println!("{name}: mean {:.4} std {:.4}", s.mean, s.std);
    }
    Ok(exit::OK)
}
