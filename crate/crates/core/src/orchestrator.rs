//! The INIT / PLAN / END state machine, run configuration and run-directory
//! persistence.
//!
//! Run directory layout:
//!
//! ```text
//! <run_root>/run-<utc timestamp>/
//!   instruction.txt  config.json  events.jsonl  transcript.jsonl
//!   requirements.json  knowledge.json
//!   round-<n>/plans.json  round-<n>/outcomes/plan-<id>.json
//!   round-<n>/outcomes/failures.json  round-<n>/verdicts.json
//!   round-<n>/selection.json  round-<n>/instruction.md
//!   code/main.py  code/manifest.json
//!   sandbox/{main.py, stdout.log, stderr.log, result.json}
//!   report.json  [feedback.json | rationale.md]
//! ```
//!
//! `report.json` holds no timestamps or durations, so replaying a transcript
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{
    generate_pipeline_code, load_skeleton, select_best_outcome, synthesize_instruction, CodegenError,
    CodegenInstruction, PipelineArtifact, TaskFamily, DEFAULT_INSTRUCTION_BUDGET,
};
use crate::execution::{execute_plans, ExecContext, ExecutionOutcome, PlanFailure, DEFAULT_TOP_K};
use crate::gateway::{ChatBackend, Gateway, GatewayError, HttpConfig, MockBackend, OpenAiCompatBackend, Transcript};
use crate::knowledge::{dataset_context, retrieve, KnowledgeBundle, KnowledgeSource, SourceId, SourceProvider};
use crate::metrics::{designated_metric, grade, GradingMode, MetricReport, NpsMetric};
use crate::planning::{devise_plans, revise_plans, PlanSet, PlanningError, DEFAULT_PLAN_COUNT};
use crate::requirements::{parse_requirements, ParseOptions, RawInstruction, RequirementsError, UserRequirements};
use crate::sandbox::{run_pipeline, SandboxConfig, SandboxError};
use crate::verification::{
    collect_fail_rationale, verify_adequacy, verify_execution, verify_implementation, verify_relevancy,
    AdequacyCheck, Feedback, FailureRecord, RelevancyCheck, VerificationError,
};

pub const DEFAULT_MAX_ROUNDS: u32 = 3;
/// Bytes of the sandbox run digest shown to the implementation verifier.
const RUN_SUMMARY_BUDGET: usize = 4_000;

/// Which chat backend a run talks to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    /// OpenAI-compatible endpoint configured through environment variables.
    Http,
    /// Line-delimited JSON mock script.
    Mock { script: PathBuf },
}

impl BackendChoice {
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        match self {
            BackendChoice::Http => OpenAiCompatBackend::new(HttpConfig::from_env())
                .map(|b| Arc::new(b) as Arc<dyn ChatBackend>)
                .map_err(|e| ConfigError::new("backend", e.to_string())),
            BackendChoice::Mock { script } => MockBackend::load_script(script)
                .map(|b| Arc::new(b) as Arc<dyn ChatBackend>)
                .map_err(|e| ConfigError::new("backend.mock_script", e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub p_count: usize,
    pub k: usize,
    pub max_rounds: u32,
    pub mode: GradingMode,
    /// Inferred from the parsed requirements when absent.
    pub task_family: Option<TaskFamily>,
    pub sandbox: SandboxConfig,
    pub sources: Vec<KnowledgeSource>,
    pub backend: BackendChoice,
    pub workers: usize,
    pub skeleton_dir: PathBuf,
    pub run_root: PathBuf,
    pub instruction_budget: usize,
    pub parse: ParseOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            p_count: DEFAULT_PLAN_COUNT,
            k: DEFAULT_TOP_K,
            max_rounds: DEFAULT_MAX_ROUNDS,
            mode: GradingMode::ConstraintFree,
            task_family: None,
            sandbox: SandboxConfig::default(),
            sources: KnowledgeSource::defaults(),
            backend: BackendChoice::Http,
            workers: DEFAULT_PLAN_COUNT,
            skeleton_dir: PathBuf::from("skeletons"),
            run_root: PathBuf::from("runs"),
            instruction_budget: DEFAULT_INSTRUCTION_BUDGET,
            parse: ParseOptions::default(),
        }
    }
}

/// TOML-facing shape of [`RunConfig`]; every field is optional and
/// overrides the current value when present.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub plans: Option<i64>,
    pub top_k: Option<i64>,
    pub max_rounds: Option<i64>,
    pub mode: Option<String>,
    pub task: Option<String>,
    pub workers: Option<i64>,
    pub skeletons: Option<PathBuf>,
    pub run_root: Option<PathBuf>,
    pub instruction_budget: Option<i64>,
    pub parse_retries: Option<i64>,
    pub sandbox: Option<SandboxSection>,
    #[serde(default)]
    pub sources: BTreeMap<String, SourceSection>,
    pub backend: Option<BackendSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSection {
    pub interpreter: Option<Vec<String>>,
    pub timeout_secs: Option<f64>,
    pub grace_secs: Option<f64>,
    pub env_allowlist: Option<Vec<String>>,
    pub dataset_path: Option<PathBuf>,
    pub output_cap: Option<i64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub enabled: Option<bool>,
    pub timeout_secs: Option<f64>,
    pub max_hits: Option<i64>,
    pub char_budget: Option<i64>,
    pub stub_dir: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub arxiv_url: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: String,
    pub mock_script: Option<PathBuf>,
}

fn positive(field: &str, value: i64) -> Result<usize, ConfigError> {
    usize::try_from(value)
        .ok()
        .filter(|v| *v >= 1)
        .ok_or_else(|| ConfigError::new(field, format!("must be a positive integer, got {value}")))
}

fn seconds(field: &str, value: f64, allow_zero: bool) -> Result<Duration, ConfigError> {
    if !value.is_finite() || value < 0.0 || (!allow_zero && value == 0.0) {
        return Err(ConfigError::new(field, format!("must be a {} number of seconds, got {value}", if allow_zero { "non-negative" } else { "positive" })));
    }
    Ok(Duration::from_secs_f64(value))
}

impl RunConfig {
    pub fn apply_file(&mut self, file: ConfigFile) -> Result<(), ConfigError> {
        if let Some(v) = file.plans {
            self.p_count = positive("plans", v)?;
        }
        if let Some(v) = file.top_k {
            self.k = positive("top_k", v)?;
        }
        if let Some(v) = file.max_rounds {
            self.max_rounds = positive("max_rounds", v)? as u32;
        }
        if let Some(v) = file.mode {
            self.mode = v.parse().map_err(|_| ConfigError::new("mode", format!("expected `free` or `aware`, got {v:?}")))?;
        }
        if let Some(v) = file.task {
            self.task_family = Some(v.parse().map_err(|e: CodegenError| ConfigError::new("task", e.to_string()))?);
        }
        if let Some(v) = file.workers {
            self.workers = positive("workers", v)?;
        }
        if let Some(v) = file.skeletons {
            self.skeleton_dir = v;
        }
        if let Some(v) = file.run_root {
            self.run_root = v;
        }
        if let Some(v) = file.instruction_budget {
            self.instruction_budget = positive("instruction_budget", v)?;
        }
        if let Some(v) = file.parse_retries {
            self.parse.max_retries = u32::try_from(v)
                .map_err(|_| ConfigError::new("parse_retries", format!("must be non-negative, got {v}")))?;
        }
        if let Some(s) = file.sandbox {
            if let Some(v) = s.interpreter {
                self.sandbox.interpreter = v;
            }
            if let Some(v) = s.timeout_secs {
                self.sandbox.timeout = seconds("sandbox.timeout_secs", v, false)?;
            }
            if let Some(v) = s.grace_secs {
                self.sandbox.grace = seconds("sandbox.grace_secs", v, true)?;
            }
            if let Some(v) = s.env_allowlist {
                self.sandbox.env_allowlist = v;
            }
            if let Some(v) = s.dataset_path {
                self.sandbox.dataset_path = Some(v);
            }
            if let Some(v) = s.output_cap {
                self.sandbox.output_cap = positive("sandbox.output_cap", v)?;
            }
        }
        for (name, section) in file.sources {
            let field = |f: &str| format!("sources.{name}.{f}");
            let id: SourceId = name.parse().map_err(|_| ConfigError::new(format!("sources.{name}"), "unknown source"))?;
            let source = self
                .sources
                .iter_mut()
                .find(|s| s.id == id)
                .expect("defaults hold every source id");
            if let Some(v) = section.enabled {
                source.enabled = v;
            }
            if let Some(v) = section.timeout_secs {
                source.timeout = seconds(&field("timeout_secs"), v, false)?;
            }
            if let Some(v) = section.max_hits {
                source.max_hits = positive(&field("max_hits"), v)?;
            }
            if let Some(v) = section.char_budget {
                source.char_budget = positive(&field("char_budget"), v)?;
            }
            let providers = [
                section.stub_dir.map(|dir| SourceProvider::Stub { dir }),
                section.endpoint.map(|endpoint| SourceProvider::JsonSearch { endpoint }),
                section.arxiv_url.map(|base_url| SourceProvider::Arxiv { base_url }),
            ];
            let mut providers = providers.into_iter().flatten();
            if let Some(p) = providers.next() {
                if providers.next().is_some() {
                    return Err(ConfigError::new(
                        format!("sources.{name}"),
                        "set at most one of stub_dir, endpoint, arxiv_url",
                    ));
                }
                source.provider = Some(p);
            }
        }
        if let Some(b) = file.backend {
            self.backend = match (b.kind.as_str(), b.mock_script) {
                ("http", _) => BackendChoice::Http,
                ("mock", Some(script)) => BackendChoice::Mock { script },
                ("mock", None) => return Err(ConfigError::new("backend.mock_script", "required when kind = \"mock\"")),
                (other, _) => return Err(ConfigError::new("backend.kind", format!("expected `http` or `mock`, got {other:?}"))),
            };
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.p_count == 0 {
            return Err(ConfigError::new("plans", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(ConfigError::new("top_k", "must be at least 1"));
        }
        if self.max_rounds == 0 {
            return Err(ConfigError::new("max_rounds", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(ConfigError::new("workers", "must be at least 1"));
        }
        if self.instruction_budget == 0 {
            return Err(ConfigError::new("instruction_budget", "must be at least 1"));
        }
        self.sandbox.validate().map_err(|e| ConfigError::new("sandbox", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum State {
    Init,
    Plan,
    End,
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            State::Init => "INIT",
            State::Plan => "PLAN",
            State::End => "END",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Started,
    Transition { to: State },
    Relevancy { passed: bool },
    RequirementsParsed,
    Adequacy { passed: bool },
    Feedback { message: String },
    KnowledgeRetrieved { sources: usize },
    PlansDevised { count: usize },
    PlansExecuted { healthy: Vec<usize>, failed: Vec<usize> },
    ExecutionVerified { passed: Vec<usize> },
    Selected { plan_id: usize, consulted: bool },
    CodeGenerated { plan_id: usize, sha256: String },
    SandboxRun { exit_code: i32, timed_out: bool },
    ImplementationVerified { passed: bool },
    RoundFailed { rationale: String },
    Completed,
    TerminalFailure,
}

/// `state` and `round` are the machine's position when the event happened;
/// for a transition that is the state being left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub state: State,
    pub round: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Checks an event log against the transition relation INIT→PLAN,
/// PLAN→PLAN (next round), PLAN→END, and that only a closing event follows
/// END.
pub fn check_event_log(events: &[Event]) -> Result<(), String> {
    let mut state = State::Init;
    let mut round = 0;
    let mut closed = false;
    for (i, e) in events.iter().enumerate() {
        if e.seq != i {
            return Err(format!("event {i}: seq {} out of order", e.seq));
        }
        if closed {
            return Err(format!("event {i}: {:?} after the closing event", e.kind));
        }
        if e.state != state || e.round != round {
            return Err(format!("event {i}: recorded at {}/r{} but machine is at {state}/r{round}", e.state, e.round));
        }
        match &e.kind {
            EventKind::Transition { to } => {
                match (state, *to) {
                    (State::Init, State::Plan) | (State::Plan, State::End) => {}
                    (State::Plan, State::Plan) => round += 1,
                    (from, to) => return Err(format!("event {i}: illegal transition {from}→{to}")),
                }
                state = *to;
            }
            EventKind::Completed | EventKind::TerminalFailure => {
                if state != State::End {
                    return Err(format!("event {i}: closing event outside END"));
                }
                closed = true;
            }
            EventKind::Feedback { .. } if state == State::Init => closed = true,
            _ if state == State::End => return Err(format!("event {i}: {:?} after END", e.kind)),
            _ => {}
        }
    }
    Ok(())
}

struct EventLog {
    path: PathBuf,
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    fn push(&self, state: State, round: u32, kind: EventKind) -> std::io::Result<()> {
        use std::io::Write;
        let mut events = self.events.lock().expect("event log poisoned");
        let event = Event { seq: events.len(), state, round, kind };
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(&event).expect("event serializes"))?;
        events.push(event);
        Ok(())
    }
}

pub fn load_event_log(path: &Path) -> std::io::Result<Vec<Event>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed { round: u32, artifact: PipelineArtifact, report: MetricReport },
    Feedback(Feedback),
    /// Every round failed. `rationale_history[n]` is the digest of round n.
    TerminalFailure { rounds: u32, rationale_history: Vec<String> },
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub outcome: RunOutcome,
    pub backend_calls: usize,
    pub plan_sets: Vec<PlanSet>,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("backend error during {stage}: {source}")]
    Backend { stage: String, source: GatewayError },
    #[error("requirement parsing failed: {0}")]
    Requirements(RequirementsError),
    #[error("{stage}: {source}")]
    Verification { stage: String, source: VerificationError },
    #[error("task family could not be inferred from the requirements; pass one explicitly")]
    UnknownTaskFamily,
    #[error(transparent)]
    Codegen(CodegenError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

impl OrchestratorError {
    /// The gateway error underneath, if any.
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            OrchestratorError::Backend { source, .. } => Some(source),
            OrchestratorError::Requirements(RequirementsError::Backend(e)) => Some(e),
            OrchestratorError::Verification { source: VerificationError::Backend(e), .. } => Some(e),
            OrchestratorError::Codegen(CodegenError::Backend(e)) => Some(e),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io { path: path.to_path_buf(), source }
}

fn write_text(path: &Path, text: &str) -> Result<(), OrchestratorError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OrchestratorError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"))
}

pub fn create_run_dir(root: &Path) -> Result<PathBuf, OrchestratorError> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    for n in 0.. {
        let name = if n == 0 { format!("run-{stamp}") } else { format!("run-{stamp}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!("unbounded suffix search")
}

/// Where a run stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StopAfter {
    Plans,
    Everything,
}

struct Machine<'a> {
    cfg: &'a RunConfig,
    gateway: Gateway,
    dir: PathBuf,
    events: EventLog,
    state: State,
    round: u32,
    plan_sets: Vec<PlanSet>,
}

enum InitResult {
    Proceed(UserRequirements),
    Feedback(Feedback),
}

enum RoundResult {
    Done(PipelineArtifact, MetricReport),
    Failed(Vec<FailureRecord>),
}

impl<'a> Machine<'a> {
    fn start(instruction: &RawInstruction, cfg: &'a RunConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let dir = create_run_dir(&cfg.run_root)?;
        write_text(&dir.join("instruction.txt"), &instruction.text)?;
        write_json(&dir.join("config.json"), cfg)?;
        let transcript_path = dir.join("transcript.jsonl");
        let transcript = Transcript::with_sink(&transcript_path).map_err(io_err(&transcript_path))?;
        let gateway = Gateway::new(backend).with_transcript(transcript);
        let events = EventLog { path: dir.join("events.jsonl"), events: Mutex::new(Vec::new()) };
        let machine = Self { cfg, gateway, dir, events, state: State::Init, round: 0, plan_sets: Vec::new() };
        machine.log(EventKind::Started)?;
        Ok(machine)
    }

    fn log(&self, kind: EventKind) -> Result<(), OrchestratorError> {
        let path = &self.events.path;
        self.events.push(self.state, self.round, kind).map_err(io_err(path))
    }

    fn goto(&mut self, to: State) -> Result<(), OrchestratorError> {
        self.log(EventKind::Transition { to })?;
        if self.state == State::Plan && to == State::Plan {
            self.round += 1;
        }
        self.state = to;
        Ok(())
    }

    fn round_dir(&self) -> PathBuf {
        self.dir.join(format!("round-{}", self.round))
    }

    fn backend(&self, stage: &str) -> impl FnOnce(GatewayError) -> OrchestratorError {
        let stage = stage.to_string();
        move |source| OrchestratorError::Backend { stage, source }
    }

    fn verification(&self, stage: &str) -> impl FnOnce(VerificationError) -> OrchestratorError {
        let stage = stage.to_string();
        move |source| OrchestratorError::Verification { stage, source }
    }

    fn feedback(&self, feedback: Feedback) -> Result<InitResult, OrchestratorError> {
        write_json(&self.dir.join("feedback.json"), &feedback)?;
        self.log(EventKind::Feedback { message: feedback.message.clone() })?;
        Ok(InitResult::Feedback(feedback))
    }

    /// Relevancy, then parsing, then adequacy.
    fn init(&mut self, instruction: &RawInstruction) -> Result<InitResult, OrchestratorError> {
        let relevancy = verify_relevancy(instruction, &self.gateway).map_err(self.verification("request relevancy"))?;
        let feedback = match relevancy {
            RelevancyCheck::Relevant(_) => None,
            RelevancyCheck::Irrelevant(_, feedback) => Some(feedback),
        };
        self.log(EventKind::Relevancy { passed: feedback.is_none() })?;
        if let Some(feedback) = feedback {
            return self.feedback(feedback);
        }

        let parsed =
            parse_requirements(instruction, &self.gateway, self.cfg.parse).map_err(OrchestratorError::Requirements)?;
        for warning in &parsed.warnings {
            tracing::warn!(%warning, "requirement document");
        }
        let r = parsed.requirements;
        write_json(&self.dir.join("requirements.json"), &r)?;
        self.log(EventKind::RequirementsParsed)?;

        let adequacy = verify_adequacy(&r, &self.gateway).map_err(self.verification("request adequacy"))?;
        let feedback = match adequacy {
            AdequacyCheck::Adequate(_) => None,
            AdequacyCheck::Inadequate(_, feedback) => Some(feedback),
        };
        self.log(EventKind::Adequacy { passed: feedback.is_none() })?;
        if let Some(feedback) = feedback {
            return self.feedback(feedback);
        }
        Ok(InitResult::Proceed(r))
    }

    fn retrieve(&self, r: &UserRequirements) -> Result<KnowledgeBundle, OrchestratorError> {
        let bundle =
            retrieve(r, &self.cfg.sources, self.cfg.workers, &self.gateway).map_err(self.backend("knowledge retrieval"))?;
        write_json(&self.dir.join("knowledge.json"), &bundle)?;
        self.log(EventKind::KnowledgeRetrieved { sources: bundle.per_source.len() })?;
        Ok(bundle)
    }

    fn plans(
        &mut self,
        r: &UserRequirements,
        knowledge: &KnowledgeBundle,
        rationale: Option<&str>,
    ) -> Result<Result<PlanSet, Vec<FailureRecord>>, OrchestratorError> {
        let result = match rationale {
            None => devise_plans(r, knowledge, self.cfg.p_count, self.cfg.workers, &self.gateway),
            Some(rationale) => {
                revise_plans(r, self.round - 1, rationale, knowledge, self.cfg.p_count, self.cfg.workers, &self.gateway)
            }
        };
        match result {
            Ok(set) => {
                write_json(&self.round_dir().join("plans.json"), &set)?;
                self.log(EventKind::PlansDevised { count: set.plans.len() })?;
                self.plan_sets.push(set.clone());
                Ok(Ok(set))
            }
            Err(PlanningError::EmptyPlan { plan_id }) => Ok(Err(vec![FailureRecord {
                plan_id: Some(plan_id),
                stage: "planning".into(),
                detail: "the planner returned an empty plan".into(),
            }])),
            Err(PlanningError::Backend { source, .. }) => Err(self.backend("planning")(source)),
            Err(e) => Err(OrchestratorError::Config(ConfigError::new("plans", e.to_string()))),
        }
    }

    fn execute(
        &self,
        r: &UserRequirements,
        knowledge: &KnowledgeBundle,
        dataset: &str,
        plans: &PlanSet,
    ) -> Result<(Vec<ExecutionOutcome>, Vec<PlanFailure>), OrchestratorError> {
        let ctx = ExecContext { requirements: r, knowledge: &knowledge.aggregate, dataset_context: dataset, k: self.cfg.k };
        let results =
            execute_plans(ctx, &plans.plans, self.cfg.workers, &self.gateway).map_err(self.backend("plan execution"))?;
        let (mut healthy, mut failed) = (Vec::new(), Vec::new());
        for result in results {
            match result {
                Ok(o) => healthy.push(o),
                Err(f) => failed.push(f),
            }
        }
        let out = self.round_dir().join("outcomes");
        for o in &healthy {
            write_json(&out.join(format!("plan-{}.json", o.plan_id)), o)?;
        }
        if !failed.is_empty() {
            write_json(&out.join("failures.json"), &failed)?;
        }
        self.log(EventKind::PlansExecuted {
            healthy: healthy.iter().map(|o| o.plan_id).collect(),
            failed: failed.iter().map(|f| f.plan_id).collect(),
        })?;
        Ok((healthy, failed))
    }

    fn round(
        &mut self,
        r: &UserRequirements,
        knowledge: &KnowledgeBundle,
        dataset: &str,
        family: TaskFamily,
        skeleton: &str,
        plans: &PlanSet,
    ) -> Result<RoundResult, OrchestratorError> {
        let (healthy, failed) = self.execute(r, knowledge, dataset, plans)?;
        let mut failures: Vec<FailureRecord> = failed
            .iter()
            .map(|f| FailureRecord { plan_id: Some(f.plan_id), stage: f.step.to_string(), detail: f.error.clone() })
            .collect();
        if healthy.is_empty() {
            return Ok(RoundResult::Failed(failures));
        }

        let verdicts = verify_execution(&healthy, r, self.round, self.cfg.workers, &self.gateway)
            .map_err(self.verification("execution verification"))?;
        write_json(&self.round_dir().join("verdicts.json"), &verdicts)?;
        self.log(EventKind::ExecutionVerified {
            passed: verdicts.iter().filter(|v| v.passed).filter_map(|v| v.plan_id).collect(),
        })?;
        failures.extend(verdicts.iter().filter(|v| !v.passed).map(FailureRecord::from_verdict));
        if verdicts.iter().all(|v| !v.passed) {
            return Ok(RoundResult::Failed(failures));
        }

        let selection =
            select_best_outcome(&healthy, &verdicts, r, self.round, &self.gateway).map_err(OrchestratorError::Codegen)?;
        write_json(&self.round_dir().join("selection.json"), &selection)?;
        self.log(EventKind::Selected { plan_id: selection.plan_id, consulted: selection.consulted })?;
        let best = healthy.iter().find(|o| o.plan_id == selection.plan_id).expect("selection is a passing outcome");

        let instruction_text = synthesize_instruction(r, best, &knowledge.aggregate, self.cfg.instruction_budget);
        write_text(&self.round_dir().join("instruction.md"), &instruction_text)?;
        let instruction = CodegenInstruction {
            best_plan_id: best.plan_id,
            instruction_text,
            skeleton_id: family,
            skeleton_text: skeleton.to_string(),
        };
        let mut artifact = match generate_pipeline_code(&instruction, self.round, &self.gateway) {
            Ok(a) => a,
            Err(CodegenError::NoCodeBlock) => {
                return Ok(RoundResult::Failed(vec![FailureRecord {
                    plan_id: Some(best.plan_id),
                    stage: "code_generation".into(),
                    detail: "the generated response contained no python code block".into(),
                }]))
            }
            Err(e) => return Err(OrchestratorError::Codegen(e)),
        };
        artifact.write_to(&self.dir.join("code")).map_err(io_err(&self.dir.join("code")))?;
        self.log(EventKind::CodeGenerated { plan_id: artifact.plan_id, sha256: artifact.manifest().sha256 })?;

        let mut sandbox = self.cfg.sandbox.clone();
        sandbox.workdir = self.dir.join("sandbox");
        let run = run_pipeline(&artifact.code, &sandbox)?;
        self.log(EventKind::SandboxRun { exit_code: run.exit_code, timed_out: run.timed_out })?;

        let verdict = verify_implementation(
            &artifact.code,
            &run.summary(RUN_SUMMARY_BUDGET),
            r,
            artifact.plan_id,
            self.round,
            &self.gateway,
        )
        .map_err(self.verification("implementation verification"))?;
        write_json(&self.round_dir().join("implementation_verdict.json"), &verdict)?;
        self.log(EventKind::ImplementationVerified { passed: verdict.passed })?;
        if !verdict.passed {
            return Ok(RoundResult::Failed(vec![FailureRecord::from_verdict(&verdict)]));
        }

        let nps_metric: NpsMetric = designated_metric(family);
        let report = grade(&run, &r.constraints(), self.cfg.mode, &nps_metric);
        artifact.attach_run(run);
        Ok(RoundResult::Done(artifact, report))
    }

    fn finish(self, outcome: RunOutcome) -> Result<RunSummary, OrchestratorError> {
        write_json(&self.dir.join("report.json"), &report_json(&outcome, self.gateway.transcript().len()))?;
        Ok(RunSummary {
            run_dir: self.dir,
            outcome,
            backend_calls: self.gateway.transcript().len(),
            plan_sets: self.plan_sets,
        })
    }

    fn drive(mut self, instruction: &RawInstruction, stop: StopAfter) -> Result<RunSummary, OrchestratorError> {
        let r = match self.init(instruction)? {
            InitResult::Proceed(r) => r,
            InitResult::Feedback(feedback) => return self.finish(RunOutcome::Feedback(feedback)),
        };
        let (family, skeleton) = if stop == StopAfter::Everything {
            let family = self.cfg.task_family.or_else(|| TaskFamily::infer(&r)).ok_or(OrchestratorError::UnknownTaskFamily)?;
            load_skeleton(&self.cfg.skeleton_dir, family.as_str()).map_err(OrchestratorError::Codegen)?
        } else {
            (TaskFamily::TabularClassification, String::new())
        };
        self.goto(State::Plan)?;

        let knowledge = self.retrieve(&r)?;
        let dataset = dataset_context(&r, &self.cfg.sources);
        let mut history: Vec<String> = Vec::new();
        loop {
            let failures = match self.plans(&r, &knowledge, history.last().map(String::as_str))? {
                Err(failures) => failures,
                Ok(_) if stop == StopAfter::Plans => {
                    self.goto(State::End)?;
                    self.log(EventKind::Completed)?;
                    let summary = RunSummary {
                        run_dir: self.dir,
                        outcome: RunOutcome::TerminalFailure { rounds: 0, rationale_history: Vec::new() },
                        backend_calls: self.gateway.transcript().len(),
                        plan_sets: self.plan_sets,
                    };
                    return Ok(summary);
                }
                Ok(plans) => match self.round(&r, &knowledge, &dataset, family, &skeleton, &plans)? {
                    RoundResult::Done(artifact, report) => {
                        self.goto(State::End)?;
                        self.log(EventKind::Completed)?;
                        let round = self.round;
                        return self.finish(RunOutcome::Completed { round, artifact, report });
                    }
                    RoundResult::Failed(failures) => failures,
                },
            };
            let rationale = collect_fail_rationale(&failures).map_err(self.verification("failure digest"))?;
            write_text(&self.round_dir().join("rationale.md"), &(rationale.clone() + "\n"))?;
            self.log(EventKind::RoundFailed { rationale: rationale.clone() })?;
            history.push(rationale);
            if self.round + 1 >= self.cfg.max_rounds {
                self.goto(State::End)?;
                self.log(EventKind::TerminalFailure)?;
                let text: Vec<String> =
                    history.iter().enumerate().map(|(n, h)| format!("## Round {n}\n{h}\n")).collect();
                write_text(&self.dir.join("rationale.md"), &text.join("\n"))?;
                let rounds = self.round + 1;
                return self.finish(RunOutcome::TerminalFailure { rounds, rationale_history: history });
            }
            self.goto(State::Plan)?;
        }
    }
}

fn report_json(outcome: &RunOutcome, backend_calls: usize) -> serde_json::Value {
    use serde_json::json;
    match outcome {
        RunOutcome::Completed { round, artifact, report } => json!({
            "outcome": "completed",
            "round": round,
            "plan_id": artifact.plan_id,
            "task_family": artifact.skeleton_id,
            "code_sha256": artifact.manifest().sha256,
            "endpoint": artifact.endpoint,
            "exit_code": artifact.run_result.as_ref().map(|r| r.exit_code),
            "metrics": report,
            "backend_calls": backend_calls,
        }),
        RunOutcome::Feedback(feedback) => json!({
            "outcome": "feedback",
            "feedback": feedback,
            "backend_calls": backend_calls,
        }),
        RunOutcome::TerminalFailure { rounds, rationale_history } => json!({
            "outcome": "terminal_failure",
            "rounds": rounds,
            "rationale_history": rationale_history,
            "backend_calls": backend_calls,
        }),
    }
}

/// Runs the full pipeline against `backend`, persisting everything under a
/// fresh directory in `cfg.run_root`.
pub fn run(
    instruction: &RawInstruction,
    cfg: &RunConfig,
    backend: Arc<dyn ChatBackend>,
) -> Result<RunSummary, OrchestratorError> {
    Machine::start(instruction, cfg, backend)?.drive(instruction, StopAfter::Everything)
}

/// Like [`run`] but stops once the first plan set exists. The outcome is
/// `Feedback` when the request is rejected and otherwise carries no meaning;
/// read `plan_sets`.
pub fn plan_only(
    instruction: &RawInstruction,
    cfg: &RunConfig,
    backend: Arc<dyn ChatBackend>,
) -> Result<RunSummary, OrchestratorError> {
    Machine::start(instruction, cfg, backend)?.drive(instruction, StopAfter::Plans)
}

/// Re-runs against a recorded transcript. Calls are served by exact tag in
/// recorded order; a call with no remaining entry fails with
/// [`GatewayError::TranscriptMismatch`].
pub fn replay(transcript: &Path, instruction: &RawInstruction, cfg: &RunConfig) -> Result<RunSummary, OrchestratorError> {
    let entries = Transcript::load_jsonl(transcript).map_err(io_err(transcript))?;
    run(instruction, cfg, Arc::new(MockBackend::from_transcript(&entries)))
}
