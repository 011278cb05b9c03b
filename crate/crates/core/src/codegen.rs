//! Best-outcome selection, implementation instruction synthesis, skeleton
//! loading and code extraction.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::execution::ExecutionOutcome;
use crate::gateway::{ChatRequest, Gateway, GatewayError, DETERMINISTIC_TEMPERATURE};
use crate::prompts::{self, ids, AgentRole, Slots};
use crate::requirements::{summarize_requirements, UserRequirements};
use crate::sandbox::RunResult;
use crate::util::truncate_chars;
use crate::verification::Verdict;

/// Function stubs every skeleton must define.
pub const SKELETON_STUBS: [&str; 6] =
    ["preprocess_data", "train_model", "evaluate_model", "prepare_model_for_deployment", "deploy_model", "main"];

/// Upper bound on the synthesized instruction length in bytes, unless the
/// constraint list alone is longer.
pub const DEFAULT_INSTRUCTION_BUDGET: usize = 24_000;

/// Per-solution byte budget for each outcome shown to the selecting manager.
const SELECTION_DIGEST_BUDGET: usize = 6_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ImageClassification,
    TextClassification,
    TabularClassification,
    TabularRegression,
    TabularClustering,
    TimeSeriesForecasting,
    NodeClassification,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 7] = [
        TaskFamily::ImageClassification,
        TaskFamily::TextClassification,
        TaskFamily::TabularClassification,
        TaskFamily::TabularRegression,
        TaskFamily::TabularClustering,
        TaskFamily::TimeSeriesForecasting,
        TaskFamily::NodeClassification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::ImageClassification => "image_classification",
            TaskFamily::TextClassification => "text_classification",
            TaskFamily::TabularClassification => "tabular_classification",
            TaskFamily::TabularRegression => "tabular_regression",
            TaskFamily::TabularClustering => "tabular_clustering",
            TaskFamily::TimeSeriesForecasting => "time_series_forecasting",
            TaskFamily::NodeClassification => "node_classification",
        }
    }

    pub fn display_name(self) -> String {
        self.as_str().replace('_', " ")
    }

    /// Best guess from the parsed downstream task and area, if any matches.
    pub fn infer(r: &UserRequirements) -> Option<TaskFamily> {
        let text = format!("{} {}", r.problem.downstream_task, r.problem.area).to_lowercase();
        let has = |needle: &str| text.contains(needle);
        if has("node") || has("graph") {
            Some(TaskFamily::NodeClassification)
        } else if has("forecast") || has("time series") || has("time-series") {
            Some(TaskFamily::TimeSeriesForecasting)
        } else if has("cluster") {
            Some(TaskFamily::TabularClustering)
        } else if has("regression") {
            Some(TaskFamily::TabularRegression)
        } else if has("image") || has("vision") {
            Some(TaskFamily::ImageClassification)
        } else if has("text") || has("language") || has("nlp") {
            Some(TaskFamily::TextClassification)
        } else if has("classif") || has("tabular") {
            Some(TaskFamily::TabularClassification)
        } else {
            None
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = CodegenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_lowercase().replace(['-', ' '], "_");
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == wanted)
            .ok_or_else(|| CodegenError::UnknownTaskFamily(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("unknown task family {0:?}")]
    UnknownTaskFamily(String),
    #[error("cannot read skeleton {path}: {source}")]
    SkeletonUnreadable { path: PathBuf, source: std::io::Error },
    #[error("skeleton {family} lacks stubs: {}", missing.join(", "))]
    SkeletonIncomplete { family: TaskFamily, missing: Vec<String> },
    #[error("no passing outcome to select from")]
    NoPassingOutcome,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("response contains no python code block")]
    NoCodeBlock,
}

fn stub_pattern() -> &'static Regex {
    static P: OnceLock<Regex> = OnceLock::new();
    P.get_or_init(|| Regex::new(r"(?m)^def\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(").expect("stub regex"))
}

/// Reads `<dir>/<task_family>.py` and checks that every stub in
/// [`SKELETON_STUBS`] is defined at top level.
pub fn load_skeleton(dir: &Path, task_family: &str) -> Result<(TaskFamily, String), CodegenError> {
    let family: TaskFamily = task_family.parse()?;
    let path = dir.join(format!("{}.py", family.as_str()));
    let text = std::fs::read_to_string(&path).map_err(|source| CodegenError::SkeletonUnreadable { path, source })?;
    let defined: BTreeSet<&str> =
        stub_pattern().captures_iter(&text).filter_map(|c| c.get(1)).map(|m| m.as_str()).collect();
    let missing: Vec<String> =
        SKELETON_STUBS.iter().filter(|s| !defined.contains(*s)).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        return Err(CodegenError::SkeletonIncomplete { family, missing });
    }
    Ok((family, text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub plan_id: usize,
    pub rationale: String,
    /// `false` when the choice was made without a backend call.
    pub consulted: bool,
}

pub fn select_tag(round: u32) -> String {
    format!("manager/select/r{round}")
}

fn chosen_plan(response: &str, passing: &[usize]) -> Option<usize> {
    static P: OnceLock<Regex> = OnceLock::new();
    let re = P.get_or_init(|| Regex::new(r"(?i)\bplan\s*(?:id\s*)?[#:=]?\s*(\d+)").expect("plan choice regex"));
    re.captures_iter(response)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .find(|id| passing.contains(id))
}

/// Picks one plan among those whose verdict passed and whose outcome is
/// present. Result is always a member of that set; an unusable reply falls
/// back to the lowest passing id.
pub fn select_best_outcome(
    outcomes: &[ExecutionOutcome],
    verdicts: &[Verdict],
    r: &UserRequirements,
    round: u32,
    gateway: &Gateway,
) -> Result<Selection, CodegenError> {
    let mut passing: Vec<usize> = verdicts
        .iter()
        .filter(|v| v.passed)
        .filter_map(|v| v.plan_id)
        .filter(|id| outcomes.iter().any(|o| o.plan_id == *id))
        .collect();
    passing.sort_unstable();
    passing.dedup();
    let Some(&lowest) = passing.first() else { return Err(CodegenError::NoPassingOutcome) };
    if passing.len() == 1 {
        return Ok(Selection { plan_id: lowest, rationale: "only passing solution".into(), consulted: false });
    }

    let solutions: Vec<String> = passing
        .iter()
        .filter_map(|id| outcomes.iter().find(|o| o.plan_id == *id))
        .map(|o| {
            format!(
                "## Plan {}\n### Data\n{}\n### Model\n{}",
                o.plan_id,
                truncate_chars(&o.data_outcome, SELECTION_DIGEST_BUDGET),
                truncate_chars(&o.model_outcome, SELECTION_DIGEST_BUDGET)
            )
        })
        .collect();
    let summary = summarize_requirements(r);
    let solutions = solutions.join("\n\n");
    let prompt = prompts::render(
        ids::SELECT_BEST,
        &Slots::from([("user_requirement_summary", summary.as_str()), ("solutions", solutions.as_str())]),
    )
    .expect("selection slots are complete");
    let request = ChatRequest::new(select_tag(round))
        .system(AgentRole::Manager.system_prompt())
        .user(prompt)
        .temperature(DETERMINISTIC_TEMPERATURE);
    let response = gateway.complete(&request)?;
    match chosen_plan(&response, &passing) {
        Some(plan_id) => Ok(Selection { plan_id, rationale: response.trim().to_string(), consulted: true }),
        None => {
            tracing::warn!(round, ?passing, "selection reply names no passing plan; using lowest id");
            Ok(Selection {
                plan_id: lowest,
                rationale: format!("unparseable selection; lowest passing plan chosen ({})", response.trim()),
                consulted: true,
            })
        }
    }
}

fn top_candidate_line(outcome: &ExecutionOutcome) -> String {
    let Some(best) = outcome.candidates.iter().min_by_key(|c| c.rank) else {
        return "the first-ranked candidate described under Modeling and Optimization".into();
    };
    if best.hyperparameters.is_empty() {
        return best.name.clone();
    }
    let params: Vec<String> = best.hyperparameters.iter().map(|(k, v)| format!("{k}: {v}")).collect();
    format!("{} ({})", best.name, params.join("; "))
}

fn fit(text: &str, share: usize) -> String {
    if text.len() <= share {
        text.to_string()
    } else if share < 64 {
        String::new()
    } else {
        truncate_chars(text, share)
    }
}

/// Renders I* for the selected outcome. Sections appear in a fixed order.
/// Only the three digests are shortened to honour `budget`; the summary,
/// candidate line and constraints are always complete.
pub fn synthesize_instruction(
    r: &UserRequirements,
    best: &ExecutionOutcome,
    knowledge: &str,
    budget: usize,
) -> String {
    let summary = summarize_requirements(r);
    let constraints = r.constraints();
    let constraint_text = if constraints.is_empty() {
        "- none stated; optimise the task's usual metric".to_string()
    } else {
        constraints
            .iter()
            .map(|c| format!("- {} ({})", c.describe(), c.effective_direction().words()))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let plan_id = best.plan_id.to_string();
    let top = top_candidate_line(best);
    let render = |data: &str, model: &str, know: &str| {
        prompts::render(
            ids::IMPLEMENTATION_INSTRUCTION,
            &Slots::from([
                ("requirement_summary", summary.as_str()),
                ("constraints", constraint_text.as_str()),
                ("plan_id", plan_id.as_str()),
                ("top_candidate", top.as_str()),
                ("data_digest", data),
                ("model_digest", model),
                ("knowledge_digest", know),
            ]),
        )
        .expect("instruction slots are complete")
    };

    let full = render(&best.data_outcome, &best.model_outcome, knowledge);
    if full.len() <= budget {
        return full;
    }
    // Model digest first, then data, then knowledge; unused share carries over.
    let mut room = budget.saturating_sub(render("", "", "").len());
    let mut take = |text: &str, parts: usize| {
        let share = room / parts;
        let kept = fit(text, share);
        room -= kept.len();
        kept
    };
    let model = take(&best.model_outcome, 3);
    let data = take(&best.data_outcome, 2);
    let know = take(knowledge, 1);
    render(&data, &model, &know)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodegenInstruction {
    pub best_plan_id: usize,
    pub instruction_text: String,
    pub skeleton_id: TaskFamily,
    pub skeleton_text: String,
}

/// Generated pipeline plus what its sandbox run reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineArtifact {
    pub code: String,
    pub skeleton_id: TaskFamily,
    pub plan_id: usize,
    #[serde(default)]
    pub run_result: Option<RunResult>,
    #[serde(default)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub task_family: TaskFamily,
    pub plan_id: usize,
    pub sha256: String,
    pub bytes: usize,
}

impl PipelineArtifact {
    /// Stores the run. The endpoint is kept only when the run exited cleanly.
    pub fn attach_run(&mut self, result: RunResult) {
        self.endpoint = if result.exit_code == 0 && !result.timed_out { result.endpoint.clone() } else { None };
        self.run_result = Some(result);
    }

    pub fn manifest(&self) -> ArtifactManifest {
        ArtifactManifest {
            task_family: self.skeleton_id,
            plan_id: self.plan_id,
            sha256: hex::encode(Sha256::digest(self.code.as_bytes())),
            bytes: self.code.len(),
        }
    }

    /// Writes `main.py` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(crate::sandbox::SCRIPT_FILE), &self.code)?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), manifest + "\n")
    }
}

pub fn codegen_tag(round: u32) -> String {
    format!("operation/codegen/r{round}")
}

/// Asks the Operation Agent to complete the skeleton. A reply without a
/// usable block is retried once with a reminder on the same tag.
pub fn generate_pipeline_code(
    instruction: &CodegenInstruction,
    round: u32,
    gateway: &Gateway,
) -> Result<PipelineArtifact, CodegenError> {
    if instruction.instruction_text.trim().is_empty() {
        return Err(CodegenError::EmptyInput("instruction"));
    }
    if instruction.skeleton_text.trim().is_empty() {
        return Err(CodegenError::EmptyInput("skeleton"));
    }
    let prompt = prompts::render(
        ids::CODE_GENERATION,
        &Slots::from([
            ("instruction", instruction.instruction_text.as_str()),
            ("skeleton", instruction.skeleton_text.as_str()),
        ]),
    )
    .expect("code generation slots are complete");
    let base = ChatRequest::new(codegen_tag(round))
        .system(AgentRole::Operation.system_prompt())
        .user(prompt)
        .temperature(DETERMINISTIC_TEMPERATURE);

    let first = gateway.complete(&base)?;
    let code = match usable_code(&first) {
        Some(code) => code,
        None => {
            tracing::warn!(round, "code generation reply had no code block; retrying once");
            let reminder = prompts::render(ids::CODE_FENCE_REMINDER, &Slots::new()).expect("reminder has no slots");
            let retry = base.assistant(first).user(reminder);
            usable_code(&gateway.complete(&retry)?).ok_or(CodegenError::NoCodeBlock)?
        }
    };
    Ok(PipelineArtifact {
        code,
        skeleton_id: instruction.skeleton_id,
        plan_id: instruction.best_plan_id,
        run_result: None,
        endpoint: None,
    })
}

fn usable_code(response: &str) -> Option<String> {
    extract_code_block(response).ok().filter(|c| !c.trim().is_empty())
}

struct Fence {
    ticks: usize,
    info: String,
}

fn fence_open(line: &str) -> Option<Fence> {
    let t = line.trim();
    let ticks = t.chars().take_while(|&c| c == '`').count();
    if ticks < 3 {
        return None;
    }
    let info = t[ticks..].trim();
    if info.contains('`') {
        return None;
    }
    Some(Fence { ticks, info: info.split_whitespace().next().unwrap_or("").to_lowercase() })
}

fn fence_closes(line: &str, ticks: usize) -> bool {
    let t = line.trim();
    t.len() >= ticks && t.chars().all(|c| c == '`')
}

/// Body of the first closed fenced block whose info string is `python`,
/// `py`, `python3` or empty. Interior bytes are preserved exactly; only the
/// newline before the closing fence is dropped.
pub fn extract_code_block(response: &str) -> Result<String, CodegenError> {
    let lines: Vec<&str> = response.split_inclusive('\n').collect();
    let mut i = 0;
    while i < lines.len() {
        let Some(fence) = fence_open(lines[i]) else {
            i += 1;
            continue;
        };
        let Some(close) = (i + 1..lines.len()).find(|&j| fence_closes(lines[j], fence.ticks)) else {
            return Err(CodegenError::NoCodeBlock);
        };
        if matches!(fence.info.as_str(), "" | "python" | "py" | "python3") {
            let body: String = lines[i + 1..close].concat();
            let body = body.strip_suffix('\n').map(|b| b.strip_suffix('\r').unwrap_or(b)).unwrap_or(&body);
            return Ok(body.to_string());
        }
        i = close + 1;
    }
    Err(CodegenError::NoCodeBlock)
}
