//! Prompting-based plan execution.
//!
//! Per plan the four steps run strictly in order: data decomposition,
//! pseudo data analysis, model decomposition, model search with HPO.
//! Distinct plans run concurrently and fail independently.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, GatewayError, CREATIVE_TEMPERATURE, DETERMINISTIC_TEMPERATURE};
use crate::planning::Plan;
use crate::prompts::{self, ids, AgentRole, Slots};
use crate::requirements::UserRequirements;
use crate::util::fan_out;

/// Candidate models requested per plan unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStep {
    DecomposeData,
    PseudoDataAnalysis,
    DecomposeModel,
    ModelSearchHpo,
}

impl ExecStep {
    pub const ORDER: [ExecStep; 4] =
        [ExecStep::DecomposeData, ExecStep::PseudoDataAnalysis, ExecStep::DecomposeModel, ExecStep::ModelSearchHpo];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecStep::DecomposeData => "decompose_data",
            ExecStep::PseudoDataAnalysis => "pseudo_data_analysis",
            ExecStep::DecomposeModel => "decompose_model",
            ExecStep::ModelSearchHpo => "model_search_hpo",
        }
    }

    fn tag_prefix(self) -> &'static str {
        match self {
            ExecStep::DecomposeData => "data/decompose",
            ExecStep::PseudoDataAnalysis => "data/analysis",
            ExecStep::DecomposeModel => "model/decompose",
            ExecStep::ModelSearchHpo => "model/search",
        }
    }

    pub fn tag(self, round: u32, plan_id: usize) -> String {
        format!("{}/r{round}/p{plan_id}", self.tag_prefix())
    }
}

impl fmt::Display for ExecStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubRole {
    Data,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedPlan {
    pub plan_id: usize,
    pub round: u32,
    pub agent_role: SubRole,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub name: String,
    pub expected_performance: BTreeMap<String, f64>,
    pub complexity: BTreeMap<String, f64>,
    /// Other `key: value` lines of the candidate that mention a number.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hyperparameters: BTreeMap<String, String>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub plan_id: usize,
    pub data_outcome: String,
    pub model_outcome: String,
    pub candidates: Vec<CandidateModel>,
}

/// Why a plan produced no outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFailure {
    pub plan_id: usize,
    pub step: ExecStep,
    pub error: String,
}

#[derive(Debug)]
pub enum StepError {
    Backend(GatewayError),
    Precondition(String),
    EmptyResponse,
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::Backend(e) => write!(f, "{e}"),
            StepError::Precondition(m) => write!(f, "precondition violated: {m}"),
            StepError::EmptyResponse => f.write_str("empty response"),
        }
    }
}

impl std::error::Error for StepError {}

fn call(tag: String, role: AgentRole, prompt: String, temperature: f32, gateway: &Gateway) -> Result<String, StepError> {
    let request = ChatRequest::new(tag).system(role.system_prompt()).user(prompt).temperature(temperature);
    let text = gateway.complete(&request).map_err(StepError::Backend)?;
    let text = text.trim().to_string();
    if text.is_empty() {
        Err(StepError::EmptyResponse)
    } else {
        Ok(text)
    }
}

pub fn decompose_for_data(r: &UserRequirements, plan: &Plan, gateway: &Gateway) -> Result<DecomposedPlan, StepError> {
    let json = r.to_pretty_json();
    let prompt = prompts::render(
        ids::DECOMPOSE_DATA,
        &Slots::from([("user_requirements", json.as_str()), ("plan", plan.text.as_str())]),
    )
    .expect("data decomposition slots are complete");
    let tag = ExecStep::DecomposeData.tag(plan.revision_round, plan.id);
    let text = call(tag, AgentRole::Data, prompt, DETERMINISTIC_TEMPERATURE, gateway)?;
    Ok(DecomposedPlan { plan_id: plan.id, round: plan.revision_round, agent_role: SubRole::Data, text })
}

/// Describes the data steps as if executed. `dataset_context` is the
/// dataset description plus any retrieved metadata or the fallback line.
pub fn pseudo_data_analysis(sub: &DecomposedPlan, dataset_context: &str, gateway: &Gateway) -> Result<String, StepError> {
    if sub.agent_role != SubRole::Data {
        return Err(StepError::Precondition("pseudo data analysis needs a data sub-plan".into()));
    }
    let prompt = prompts::render(
        ids::PSEUDO_DATA_ANALYSIS,
        &Slots::from([("decomposed_data_plan", sub.text.as_str()), ("available_sources", dataset_context)]),
    )
    .expect("pseudo data analysis slots are complete");
    let tag = ExecStep::PseudoDataAnalysis.tag(sub.round, sub.plan_id);
    call(tag, AgentRole::Data, prompt, CREATIVE_TEMPERATURE, gateway)
}

pub fn decompose_for_model(
    r: &UserRequirements,
    plan: &Plan,
    data_outcome: &str,
    gateway: &Gateway,
) -> Result<DecomposedPlan, StepError> {
    if data_outcome.trim().is_empty() {
        return Err(StepError::Precondition("data outcome is empty".into()));
    }
    let json = r.to_pretty_json();
    let prompt = prompts::render(
        ids::DECOMPOSE_MODEL,
        &Slots::from([
            ("user_requirements", json.as_str()),
            ("project_plan", plan.text.as_str()),
            ("data_result", data_outcome),
        ]),
    )
    .expect("model decomposition slots are complete");
    let tag = ExecStep::DecomposeModel.tag(plan.revision_round, plan.id);
    let text = call(tag, AgentRole::Model, prompt, DETERMINISTIC_TEMPERATURE, gateway)?;
    Ok(DecomposedPlan { plan_id: plan.id, round: plan.revision_round, agent_role: SubRole::Model, text })
}

/// Estimates the top-`k` candidates without training anything.
pub fn model_search_hpo(sub: &DecomposedPlan, k: usize, insight_context: &str, gateway: &Gateway) -> Result<String, StepError> {
    if sub.agent_role != SubRole::Model {
        return Err(StepError::Precondition("model search needs a model sub-plan".into()));
    }
    if k == 0 {
        return Err(StepError::Precondition("k must be at least 1".into()));
    }
    let k_text = k.to_string();
    let prompt = prompts::render(
        ids::MODEL_SEARCH_HPO,
        &Slots::from([
            ("decomposed_model_plan", sub.text.as_str()),
            ("available_sources", insight_context),
            ("k", k_text.as_str()),
        ]),
    )
    .expect("model search slots are complete");
    let tag = ExecStep::ModelSearchHpo.tag(sub.round, sub.plan_id);
    call(tag, AgentRole::Model, prompt, CREATIVE_TEMPERATURE, gateway)
}

/// Inputs shared by every plan of a round.
#[derive(Debug, Clone, Copy)]
pub struct ExecContext<'a> {
    pub requirements: &'a UserRequirements,
    pub knowledge: &'a str,
    pub dataset_context: &'a str,
    pub k: usize,
}

/// Runs the four steps for one plan.
pub fn execute_plan(ctx: ExecContext<'_>, plan: &Plan, gateway: &Gateway) -> Result<ExecutionOutcome, (ExecStep, StepError)> {
    let at = |step| move |e| (step, e);
    let data_sub = decompose_for_data(ctx.requirements, plan, gateway).map_err(at(ExecStep::DecomposeData))?;
    let data_outcome =
        pseudo_data_analysis(&data_sub, ctx.dataset_context, gateway).map_err(at(ExecStep::PseudoDataAnalysis))?;
    let model_sub =
        decompose_for_model(ctx.requirements, plan, &data_outcome, gateway).map_err(at(ExecStep::DecomposeModel))?;
    let model_outcome =
        model_search_hpo(&model_sub, ctx.k, ctx.knowledge, gateway).map_err(at(ExecStep::ModelSearchHpo))?;
    let candidates = parse_candidates(&model_outcome, ctx.k);
    Ok(ExecutionOutcome { plan_id: plan.id, data_outcome, model_outcome, candidates })
}

/// Executes every plan on up to `workers` threads. Results follow plan
/// order. Step failures become [`PlanFailure`]s; exhausted mocks and
/// transcript mismatches abort the whole call.
pub fn execute_plans(
    ctx: ExecContext<'_>,
    plans: &[Plan],
    workers: usize,
    gateway: &Gateway,
) -> Result<Vec<Result<ExecutionOutcome, PlanFailure>>, GatewayError> {
    let results = fan_out(plans, workers, |plan| execute_plan(ctx, plan, gateway));
    results
        .into_iter()
        .zip(plans)
        .map(|(result, plan)| match result {
            Ok(outcome) => Ok(Ok(outcome)),
            Err((_, StepError::Backend(e))) if e.is_harness_error() => Err(e),
            Err((step, e)) => {
                tracing::warn!(plan = plan.id, %step, error = %e, "plan execution failed");
                Ok(Err(PlanFailure { plan_id: plan.id, step, error: e.to_string() }))
            }
        })
        .collect()
}

struct CandidatePatterns {
    numbered: Regex,
    bullet: Regex,
    number: Regex,
}

fn patterns() -> &'static CandidatePatterns {
    static P: OnceLock<CandidatePatterns> = OnceLock::new();
    P.get_or_init(|| CandidatePatterns {
        numbered: Regex::new(r"^\s*(?:#{1,6}\s*)?(?:\*\*)?\s*\d+\s*[.)]\s*(.+?)\s*$").expect("numbered regex"),
        bullet: Regex::new(r"^\s*[-*+]\s+(?:\*\*)?([^:*]{1,80}?)(?:\*\*)?\s*:\s*(?:\*\*)?\s*(.*?)\s*$").expect("bullet regex"),
        number: Regex::new(r"(?i)([-+]?\d+(?:,\d{3})*(?:\.\d+)?)\s*(%|million|billion|thousand|[mbk]\b)?").expect("number regex"),
    })
}

fn is_heading(line: &str) -> bool {
    let t = line.trim();
    t.starts_with('#') || (t.starts_with("**") && t.ends_with("**") && t.len() > 4)
}

fn clean_name(raw: &str) -> String {
    let raw = raw.trim();
    let name = if let Some(rest) = raw.strip_prefix("**") {
        match rest.find("**") {
            Some(end) => &rest[..end],
            None => rest,
        }
    } else {
        let cut = [": ", " - ", " – "].iter().filter_map(|sep| raw.find(sep)).min().unwrap_or(raw.len());
        &raw[..cut]
    };
    name.replace("**", "").trim().trim_end_matches(':').trim().to_string()
}

/// First number in `value`, scaled by a following multiplier word or
/// percent sign.
pub fn first_number(value: &str) -> Option<f64> {
    let caps = patterns().number.captures(value)?;
    let base: f64 = caps[1].replace(',', "").parse().ok()?;
    let scale = match caps.get(2).map(|m| m.as_str().to_ascii_lowercase()) {
        Some(ref s) if s == "%" => 0.01,
        Some(ref s) if s == "thousand" || s == "k" => 1e3,
        Some(ref s) if s == "million" || s == "m" => 1e6,
        Some(ref s) if s == "billion" || s == "b" => 1e9,
        _ => 1.0,
    };
    Some(base * scale).filter(|v| v.is_finite())
}

enum KeyKind {
    Performance,
    Complexity,
    Other,
}

fn key_kind(key: &str) -> KeyKind {
    let lower = key.to_lowercase();
    const COMPLEXITY: &[&str] = &["param", "flop", "size", "time", "latency", "speed", "memory", "throughput"];
    const PERFORMANCE: &[&str] =
        &["accuracy", "f1", "precision", "recall", "auc", "rmse", "rmsle", "mae", "mse", "error", "loss", "score", "rand index", "r2"];
    if lower.contains("batch") {
        KeyKind::Other
    } else if COMPLEXITY.iter().any(|k| lower.contains(k)) {
        KeyKind::Complexity
    } else if PERFORMANCE.iter().any(|k| lower.contains(k)) || lower.trim() == "ri" || lower.trim() == "acc" {
        KeyKind::Performance
    } else {
        KeyKind::Other
    }
}

/// Best-effort extraction of up to `k` candidates from a model-search
/// outcome. Never fails; ranks are `1..=n` in document order.
pub fn parse_candidates(model_outcome: &str, k: usize) -> Vec<CandidateModel> {
    let lines: Vec<&str> = model_outcome.lines().collect();
    let start = lines
        .iter()
        .rposition(|l| is_heading(l) && l.to_lowercase().contains("candidate") && !patterns().numbered.is_match(l))
        .map(|i| i + 1)
        .unwrap_or(0);

    let p = patterns();
    let mut out: Vec<CandidateModel> = Vec::new();
    let mut current: Option<CandidateModel> = None;
    for line in &lines[start..] {
        if let Some(caps) = p.numbered.captures(line) {
            let name = clean_name(&caps[1]);
            if let Some(done) = current.take() {
                out.push(done);
            }
            if !name.is_empty() {
                current = Some(CandidateModel {
                    name,
                    expected_performance: BTreeMap::new(),
                    complexity: BTreeMap::new(),
                    hyperparameters: BTreeMap::new(),
                    rank: 0,
                });
            }
            continue;
        }
        if line.trim_start().starts_with('#') {
            if let Some(done) = current.take() {
                out.push(done);
            }
            continue;
        }
        let Some(candidate) = current.as_mut() else { continue };
        let Some(caps) = p.bullet.captures(line) else { continue };
        let key = caps[1].trim().to_string();
        let value = caps[2].trim().trim_end_matches("**").trim();
        let Some(number) = first_number(value) else { continue };
        match key_kind(&key) {
            KeyKind::Performance => {
                candidate.expected_performance.entry(key).or_insert(number);
            }
            KeyKind::Complexity => {
                candidate.complexity.entry(key).or_insert(number);
            }
            KeyKind::Other => {
                candidate.hyperparameters.entry(key).or_insert_with(|| value.to_string());
            }
        }
    }
    out.extend(current);
    out.truncate(k);
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    const MODEL_SAMPLE: &str = "\
### Detailed Steps for Modeling and Optimization

#### 1. Retrieving High-Performance Models

- **ResNet18**: A well-known deep learning model.

### Candidate Models and Expected Performance

**1. ResNet18**
- **Accuracy**: Expected to achieve around 88
- **Number of Parameters**: Approximately 11.7 million.
- **FLOPs**: Around 1.8 billion.
- **Learning Rate**: 0.001 with Adam.
- **Batch Size**: 32

**2. EfficientNet-B0**
- **Accuracy**: Expected to achieve around 87
- **Model Size**: Approximately 20 MB.

**3. Vision Transformer (ViT-Small)**
- **Accuracy**: Expected to achieve around 86

By following these detailed steps you will select the top-3 models.
";

    fn banana() -> UserRequirements {
        serde_json::from_str(include_str!("../../../fixtures/requirements/banana_constraint_aware.json")).unwrap()
    }

    fn plan(id: usize) -> Plan {
        Plan { id, text: format!("PLAN-TEXT-{id}"), revision_round: 0, knowledge_digest: String::new() }
    }

    fn full_script(ids: &[usize]) -> MockBackend {
        ids.iter().fold(MockBackend::default(), |m, &i| {
            m.respond(&ExecStep::DecomposeData.tag(0, i), format!("DD-{i}"))
                .respond(&ExecStep::PseudoDataAnalysis.tag(0, i), format!("OD-{i}"))
                .respond(&ExecStep::DecomposeModel.tag(0, i), format!("DM-{i}"))
                .respond(&ExecStep::ModelSearchHpo.tag(0, i), format!("OM-{i}\n1. Model{i}\n- Accuracy: 0.9"))
        })
    }

    fn ctx<'a>(r: &'a UserRequirements) -> ExecContext<'a> {
        ExecContext { requirements: r, knowledge: "KNOWLEDGE", dataset_context: "DATASET-CTX", k: 3 }
    }

    #[test]
    fn candidates_from_sample() {
        let c = parse_candidates(MODEL_SAMPLE, 3);
        let names: Vec<_> = c.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["ResNet18", "EfficientNet-B0", "Vision Transformer (ViT-Small)"]);
        assert_eq!(c[0].expected_performance["Accuracy"], 88.0);
        assert_eq!(c[0].complexity["Number of Parameters"], 11.7e6);
        assert_eq!(c[0].complexity["FLOPs"], 1.8e9);
        assert_eq!(c[0].hyperparameters["Learning Rate"], "0.001 with Adam.");
        assert_eq!(c[0].hyperparameters["Batch Size"], "32");
        assert_eq!(c.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn candidates_truncate_and_degenerate() {
        let text = "1. A\n2. B\n3. C\n4. D\n5. E";
        let c = parse_candidates(text, 3);
        assert_eq!(c.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), vec!["A", "B", "C"]);
        assert!(parse_candidates("", 3).is_empty());
        assert!(parse_candidates("no list here", 3).is_empty());
        let c = parse_candidates("### 1. XGBoost: gradient boosting\n- F1 score: 95%", 1);
        assert_eq!(c[0].name, "XGBoost");
        assert!((c[0].expected_performance["F1 score"] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn one_plan_four_calls_in_order() {
        let r = banana();
        let gw = Gateway::new(Arc::new(full_script(&[0])));
        let out = execute_plan(ctx(&r), &plan(0), &gw).unwrap();
        assert_eq!(out.data_outcome, "OD-0");
        assert!(out.model_outcome.starts_with("OM-0"));
        assert_eq!(out.candidates[0].name, "Model0");
        let tags: Vec<_> = gw.transcript().entries().into_iter().map(|e| e.tag).collect();
        assert_eq!(tags, vec!["data/decompose/r0/p0", "data/analysis/r0/p0", "model/decompose/r0/p0", "model/search/r0/p0"]);
        let prompts: Vec<_> = gw.transcript().entries().iter().map(|e| e.prompt()).collect();
        assert!(prompts[0].contains("How to retrieve or collect the dataset(s)?"));
        assert!(prompts[0].contains("you should not perform data visualization"));
        assert!(prompts[1].contains("explain **detailed** steps for data manipulation"));
        assert!(prompts[1].contains("DATASET-CTX"));
        assert!(prompts[2].contains("**Explanations and Results from the Data Scientist**\nOD-0"));
        assert!(prompts[3].contains("Do not use any placeholder for the quantitative performance"));
        assert!(prompts[3].contains("top-3 candidate models"));
        assert!(prompts[3].contains("of the three candidate models"));
        assert!(prompts[3].contains("KNOWLEDGE"));
    }

    #[test]
    fn three_plans_twelve_calls_and_isolation() {
        let r = banana();
        let gw = Gateway::new(Arc::new(full_script(&[0, 1, 2])));
        let out = execute_plans(ctx(&r), &[plan(0), plan(1), plan(2)], 3, &gw).unwrap();
        assert!(out.iter().all(Result::is_ok));
        assert_eq!(gw.transcript().len(), 12);
        for e in gw.transcript().entries() {
            let own = e.tag.rsplit('/').next().unwrap().trim_start_matches('p').to_string();
            for other in ["0", "1", "2"].iter().filter(|o| **o != own) {
                assert!(!e.prompt().contains(&format!("PLAN-TEXT-{other}")), "{}", e.tag);
            }
        }
    }

    #[test]
    fn failing_step_isolated() {
        let r = banana();
        let err = GatewayError::Transport { status: Some(500), message: "down".into() };
        let mock = full_script(&[0, 2]).fail(&ExecStep::DecomposeData.tag(0, 1), &err);
        let gw = Gateway::new(Arc::new(mock)).with_policy(crate::gateway::RetryPolicy::none());
        let out = execute_plans(ctx(&r), &[plan(0), plan(1), plan(2)], 3, &gw).unwrap();
        assert!(out[0].is_ok() && out[2].is_ok());
        let failure = out[1].as_ref().unwrap_err();
        assert_eq!(failure.step, ExecStep::DecomposeData);
        assert_eq!(failure.plan_id, 1);
    }

    #[test]
    fn exhausted_mock_aborts() {
        let r = banana();
        let gw = Gateway::new(Arc::new(MockBackend::default()));
        assert!(matches!(
            execute_plans(ctx(&r), &[plan(0)], 1, &gw),
            Err(GatewayError::MockExhausted { .. })
        ));
    }

    #[test]
    fn model_decomposition_needs_data_outcome() {
        let gw = Gateway::new(Arc::new(MockBackend::default()));
        assert!(matches!(decompose_for_model(&banana(), &plan(0), " ", &gw), Err(StepError::Precondition(_))));
        assert!(gw.transcript().is_empty());
    }
}
