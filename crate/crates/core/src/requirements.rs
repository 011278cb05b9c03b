//! Standardized requirement document and the Prompt Agent parser.
//!
//! [`parse_requirements`] asks the backend to fill the JSON schema shipped in
//! `schemas/requirements.schema.json`, extracts the JSON object from the
//! reply, and runs [`validate_requirements`]. Invalid replies are retried
//! with the violation list fed back to the model.

use std::collections::BTreeSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, DETERMINISTIC_TEMPERATURE};
use crate::prompts::{self, ids, AgentRole, Slots};
use crate::util::fmt_number;

/// JSON schema sent to the Prompt Agent.
pub const REQUIREMENTS_SCHEMA: &str = include_str!("../../../schemas/requirements.schema.json");

/// Declares an open token set: known values get variants, anything else is
/// preserved verbatim in `Other`.
macro_rules! open_token {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(from = "String", into = "String")]
        pub enum $name {
            $($variant,)+
            Other(String),
        }

        impl $name {
            pub fn as_str(&self) -> &str {
                match self {
                    $($name::$variant => $text,)+
                    $name::Other(s) => s,
                }
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                match s.as_str() {
                    $($text => $name::$variant,)+
                    _ => $name::Other(s),
                }
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

open_token!(
    /// What the user wants from the system.
    Intent { Build => "build", Consult => "consult", Unclear => "unclear" }
);
open_token!(
    DataSource { UserUpload => "user-upload", HubSearch => "hub-search", Unspecified => "unspecified" }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub intent: Intent,
    pub expertise: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

impl Direction {
    pub fn symbol(self) -> &'static str {
        match self {
            Direction::AtLeast => "≥",
            Direction::AtMost => "≤",
        }
    }

    pub fn words(self) -> &'static str {
        match self {
            Direction::AtLeast => "at least",
            Direction::AtMost => "at most",
        }
    }
}

/// A performance or complexity target such as `accuracy ≥ 0.98`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConstraint {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Explicit direction; when absent it is inferred from the name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl MetricConstraint {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value: Some(value), direction: None, units: None }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = Some(direction);
        self
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = Some(units.into());
        self
    }

    pub fn effective_direction(&self) -> Direction {
        self.direction.unwrap_or_else(|| default_direction(&self.name))
    }

    /// `accuracy ≥ 0.98`, `training time ≤ 10 minutes`, or just the name
    /// when no target value was given.
    pub fn describe(&self) -> String {
        match self.value {
            Some(v) => {
                let units = self.units.as_deref().map(|u| format!(" {u}")).unwrap_or_default();
                format!("{} {} {}{}", self.name, self.effective_direction().symbol(), fmt_number(v), units)
            }
            None => self.name.clone(),
        }
    }
}

/// Loss, error, latency, time, size and cost metrics are bounded from above;
/// everything else (accuracy, F1, Rand index, ...) from below.
pub fn default_direction(metric: &str) -> Direction {
    let key: String = metric.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect();
    const AT_MOST: &[&str] = &[
        "loss", "error", "rmse", "rmsle", "mse", "mae", "mape", "latency", "time", "size", "memory", "param",
        "flop", "cost", "perplexity", "duration",
    ];
    if AT_MOST.iter().any(|needle| key.contains(needle)) {
        Direction::AtMost
    } else {
        Direction::AtLeast
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub area: String,
    pub downstream_task: String,
    pub application_domain: String,
    pub description: String,
    pub performance_metrics: Vec<MetricConstraint>,
    pub complexity_metrics: Vec<MetricConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub modality: Vec<String>,
    pub target_variables: Vec<String>,
    pub specification: Option<String>,
    pub description: String,
    pub preprocessing: Vec<String>,
    pub augmentation: Vec<String>,
    pub visualization: Vec<String>,
    pub source: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub specification: Option<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub target_device: String,
    pub inference_engine: String,
    pub deployment_endpoint: String,
}

/// The parsed requirement document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRequirements {
    pub user: UserProfile,
    pub problem: Problem,
    pub dataset: Vec<DatasetSpec>,
    pub model: Vec<ModelSpec>,
    pub knowledge: Option<String>,
    pub service: Option<ServiceSpec>,
}

impl UserRequirements {
    /// All performance and complexity constraints, performance first.
    pub fn constraints(&self) -> Vec<MetricConstraint> {
        self.problem.performance_metrics.iter().chain(&self.problem.complexity_metrics).cloned().collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("requirements serialize")
    }
}

/// The user's instruction as received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInstruction {
    pub text: String,
    pub received_at: DateTime<Utc>,
}

impl RawInstruction {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), received_at: Utc::now() }
    }

    pub fn is_blank(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaFailure {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("no JSON object found in response")]
    NoJson,
    #[error("response is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("requirements violate the schema: {}", .0.join("; "))]
    Violations(Vec<String>),
}

#[derive(Debug, Error)]
pub enum RequirementsError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("schema error after {attempts} attempt(s): {failure}")]
    Schema { failure: SchemaFailure, attempts: u32 },
}

/// A validated document plus notes about discarded content.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedRequirements {
    pub requirements: UserRequirements,
    pub warnings: Vec<String>,
}

struct Checker {
    violations: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    OptStr,
    StrList,
    Metrics,
}

impl Checker {
    fn object<'a>(&mut self, value: &'a Value, path: &str) -> Option<&'a Map<String, Value>> {
        match value {
            Value::Object(map) => Some(map),
            other => {
                self.violations.push(format!("{path}: expected object, found {}", type_name(other)));
                None
            }
        }
    }

    fn unknown_keys(&mut self, map: &Map<String, Value>, known: &[&str], path: &str) {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                let at = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                self.warnings.push(format!("{at}: unknown key discarded"));
            }
        }
    }

    fn fields(&mut self, map: &Map<String, Value>, path: &str, spec: &[(&str, Kind)]) {
        for (key, kind) in spec {
            let at = format!("{path}.{key}");
            match map.get(*key) {
                None => self.violations.push(format!("{at}: missing")),
                Some(v) => self.kind(v, &at, *kind),
            }
        }
        let known: Vec<&str> = spec.iter().map(|(k, _)| *k).collect();
        self.unknown_keys(map, &known, path);
    }

    fn kind(&mut self, value: &Value, path: &str, kind: Kind) {
        match (kind, value) {
            (Kind::Str, Value::String(_)) | (Kind::OptStr, Value::String(_) | Value::Null) => {}
            (Kind::StrList, Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    if !item.is_string() {
                        self.violations.push(format!("{path}[{i}]: expected string, found {}", type_name(item)));
                    }
                }
            }
            (Kind::Metrics, Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    self.metric(item, &format!("{path}[{i}]"));
                }
            }
            (kind, other) => {
                let expected = match kind {
                    Kind::Str => "string",
                    Kind::OptStr => "string or null",
                    Kind::StrList => "array of strings",
                    Kind::Metrics => "array of metric objects",
                };
                self.violations.push(format!("{path}: expected {expected}, found {}", type_name(other)));
            }
        }
    }

    fn metric(&mut self, value: &Value, path: &str) {
        let Some(map) = self.object(value, path) else { return };
        match map.get("name") {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            Some(Value::String(_)) => self.violations.push(format!("{path}.name: must be non-empty")),
            Some(other) => self.violations.push(format!("{path}.name: expected string, found {}", type_name(other))),
            None => self.violations.push(format!("{path}.name: missing")),
        }
        match map.get("value") {
            None | Some(Value::Null) => {}
            Some(Value::Number(n)) if n.as_f64().is_some_and(f64::is_finite) => {}
            Some(other) => {
                self.violations.push(format!("{path}.value: expected finite number, found {}", type_name(other)))
            }
        }
        match map.get("direction") {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) if s == "at_least" || s == "at_most" => {}
            Some(other) => self.violations.push(format!("{path}.direction: expected \"at_least\" or \"at_most\", found {other}")),
        }
        if let Some(v) = map.get("units") {
            self.kind(v, &format!("{path}.units"), Kind::OptStr);
        }
        self.unknown_keys(map, &["name", "value", "direction", "units"], path);
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

const TOP_LEVEL: [&str; 6] = ["user", "problem", "dataset", "model", "knowledge", "service"];

/// Checks an untyped document against the requirement schema.
///
/// Returns either the typed document (with warnings for unknown keys, which
/// are dropped) or the full list of violations. Never panics.
pub fn validate_requirements(candidate: &Value) -> Result<ValidatedRequirements, Vec<String>> {
    let mut c = Checker { violations: Vec::new(), warnings: Vec::new() };
    let Some(root) = c.object(candidate, "$") else { return Err(c.violations) };
    for key in TOP_LEVEL {
        if !root.contains_key(key) {
            c.violations.push(format!("{key}: missing"));
        }
    }
    c.unknown_keys(root, &TOP_LEVEL, "");

    if let Some(user) = root.get("user") {
        if let Some(map) = c.object(user, "user") {
            c.fields(map, "user", &[("intent", Kind::Str), ("expertise", Kind::Str)]);
        }
    }
    if let Some(problem) = root.get("problem") {
        if let Some(map) = c.object(problem, "problem") {
            c.fields(
                map,
                "problem",
                &[
                    ("area", Kind::Str),
                    ("downstream_task", Kind::Str),
                    ("application_domain", Kind::Str),
                    ("description", Kind::Str),
                    ("performance_metrics", Kind::Metrics),
                    ("complexity_metrics", Kind::Metrics),
                ],
            );
        }
    }
    const DATASET: &[(&str, Kind)] = &[
        ("name", Kind::Str),
        ("modality", Kind::StrList),
        ("target_variables", Kind::StrList),
        ("specification", Kind::OptStr),
        ("description", Kind::Str),
        ("preprocessing", Kind::StrList),
        ("augmentation", Kind::StrList),
        ("visualization", Kind::StrList),
        ("source", Kind::Str),
    ];
    const MODEL: &[(&str, Kind)] = &[
        ("name", Kind::Str),
        ("family", Kind::Str),
        ("type", Kind::Str),
        ("specification", Kind::OptStr),
        ("description", Kind::Str),
    ];
    for (key, spec) in [("dataset", DATASET), ("model", MODEL)] {
        match root.get(key) {
            None => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let path = format!("{key}[{i}]");
                    if let Some(map) = c.object(item, &path) {
                        c.fields(map, &path, spec);
                    }
                }
            }
            Some(other) => c.violations.push(format!("{key}: expected array, found {}", type_name(other))),
        }
    }
    if let Some(knowledge) = root.get("knowledge") {
        c.kind(knowledge, "knowledge", Kind::OptStr);
    }
    match root.get("service") {
        None | Some(Value::Null) => {}
        Some(service) => {
            if let Some(map) = c.object(service, "service") {
                c.fields(
                    map,
                    "service",
                    &[("target_device", Kind::Str), ("inference_engine", Kind::Str), ("deployment_endpoint", Kind::Str)],
                );
            }
        }
    }

    let is_build = root.get("user").and_then(|u| u.get("intent")).and_then(Value::as_str) == Some("build");
    if is_build && root.get("dataset").and_then(Value::as_array).is_some_and(Vec::is_empty) {
        c.violations.push("dataset: must be non-empty for a build request".into());
    }

    if !c.violations.is_empty() {
        return Err(c.violations);
    }
    match serde_json::from_value::<UserRequirements>(candidate.clone()) {
        Ok(requirements) => Ok(ValidatedRequirements { requirements, warnings: c.warnings }),
        Err(e) => Err(vec![format!("$: {e}")]),
    }
}

/// Locates the JSON object in an LLM reply: the body of the first fenced
/// block when present, otherwise the whole text, narrowed to the first
/// balanced `{...}`.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let region = fenced_body(text).unwrap_or(text);
    first_balanced_object(region).or_else(|| first_balanced_object(text))
}

fn fenced_body(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(&body[..close])
}

fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn interpret_reply(reply: &str) -> Result<ValidatedRequirements, SchemaFailure> {
    let json = extract_json_object(reply).ok_or(SchemaFailure::NoJson)?;
    let value: Value = serde_json::from_str(json).map_err(|e| SchemaFailure::InvalidJson(e.to_string()))?;
    validate_requirements(&value).map_err(SchemaFailure::Violations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    /// Additional attempts after the first invalid reply.
    pub max_retries: u32,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { max_retries: 2 }
    }
}

pub const PARSE_TAG: &str = "prompt/parse";

/// Parses the instruction into a validated requirement document.
pub fn parse_requirements(
    instruction: &RawInstruction,
    gateway: &Gateway,
    options: ParseOptions,
) -> Result<ValidatedRequirements, RequirementsError> {
    if instruction.is_blank() {
        return Err(RequirementsError::Schema { failure: SchemaFailure::EmptyInstruction, attempts: 0 });
    }
    let system = prompts::render(ids::PROMPT_AGENT_SYSTEM, &Slots::from([("json_specification", REQUIREMENTS_SCHEMA.trim_end())]))
        .expect("prompt agent template has a single slot");
    debug_assert!(AgentRole::Prompt.system_prompt().contains("{json_specification}"));

    let mut request = ChatRequest::new(PARSE_TAG)
        .system(system)
        .user(instruction.text.trim())
        .temperature(DETERMINISTIC_TEMPERATURE);
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = gateway.complete(&request)?;
        match interpret_reply(&reply) {
            Ok(validated) => {
                for w in &validated.warnings {
                    tracing::warn!(warning = %w, "requirement parsing");
                }
                return Ok(validated);
            }
            Err(failure) if attempts <= options.max_retries => {
                tracing::warn!(attempt = attempts, %failure, "invalid requirement document, retrying");
                let listing = match &failure {
                    SchemaFailure::Violations(v) => v.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n"),
                    other => format!("- {other}"),
                };
                let retry = prompts::render(ids::PARSE_RETRY, &Slots::from([("violations", listing.as_str())]))
                    .expect("retry template has a single slot");
                request = request.assistant(reply).user(retry);
            }
            Err(failure) => return Err(RequirementsError::Schema { failure, attempts }),
        }
    }
}

/// Deterministic one-paragraph rendering used in retrieval and planning
/// prompts.
pub fn summarize_requirements(r: &UserRequirements) -> String {
    let mut parts = Vec::new();

    let task = non_empty(&r.problem.downstream_task).unwrap_or("machine learning");
    let mut lead = format!("The user ({} expertise) wants to {} a {task} solution", r.user.expertise, r.user.intent);
    if let Some(area) = non_empty(&r.problem.area) {
        lead.push_str(&format!(" in the {area} area"));
    }
    if let Some(domain) = non_empty(&r.problem.application_domain) {
        lead.push_str(&format!(" for the {domain} domain"));
    }
    parts.push(format!("{lead}."));

    if let Some(desc) = non_empty(&r.problem.description) {
        parts.push(format!("Task description: {}", terminate(desc)));
    }

    if !r.dataset.is_empty() {
        let items: Vec<String> = r
            .dataset
            .iter()
            .map(|d| {
                let mut details = Vec::new();
                if !d.modality.is_empty() {
                    details.push(d.modality.join("/"));
                }
                if !d.target_variables.is_empty() {
                    details.push(format!("target: {}", d.target_variables.join(", ")));
                }
                details.push(format!("source: {}", d.source));
                format!("{} ({})", d.name, details.join("; "))
            })
            .collect();
        parts.push(format!("Dataset(s): {}.", items.join(", ")));
    }

    let models: Vec<&str> = r.model.iter().filter_map(|m| non_empty(&m.name)).collect();
    if !models.is_empty() {
        parts.push(format!("Preferred model(s): {}.", models.join(", ")));
    }

    let constraints = r.constraints();
    if !constraints.is_empty() {
        let listed: Vec<String> = constraints.iter().map(MetricConstraint::describe).collect();
        parts.push(format!("Constraints: {}.", listed.join(", ")));
    }

    if let Some(service) = &r.service {
        let fields: Vec<&str> = [&service.target_device, &service.inference_engine, &service.deployment_endpoint]
            .into_iter()
            .filter_map(|s| non_empty(s))
            .collect();
        if !fields.is_empty() {
            parts.push(format!("Deployment: {}.", fields.join(", ")));
        }
    }
    if let Some(knowledge) = r.knowledge.as_deref().and_then(non_empty) {
        parts.push(format!("User knowledge: {}", terminate(knowledge)));
    }
    parts.join(" ")
}

fn non_empty(s: &str) -> Option<&str> {
    let t = s.trim();
    (!t.is_empty()).then_some(t)
}

fn terminate(s: &str) -> String {
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// Names of all metric constraints, deduplicated, in document order.
pub fn constraint_names(r: &UserRequirements) -> Vec<String> {
    let mut seen = BTreeSet::new();
    r.constraints().into_iter().map(|c| c.name).filter(|n| seen.insert(n.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use serde_json::json;
    use std::sync::Arc;

    const AWARE: &str = include_str!("../../../fixtures/requirements/banana_constraint_aware.json");
    const FREE: &str = include_str!("../../../fixtures/requirements/banana_constraint_free.json");

    fn fixture(text: &str) -> UserRequirements {
        validate_requirements(&serde_json::from_str(text).unwrap()).unwrap().requirements
    }

    #[test]
    fn fixtures_validate_cleanly() {
        for text in [AWARE, FREE] {
            let v = validate_requirements(&serde_json::from_str(text).unwrap()).unwrap();
            assert!(v.warnings.is_empty(), "{:?}", v.warnings);
        }
    }

    #[test]
    fn missing_service_is_reported() {
        let mut doc: Value = serde_json::from_str(FREE).unwrap();
        doc.as_object_mut().unwrap().remove("service");
        assert_eq!(validate_requirements(&doc).unwrap_err(), vec!["service: missing".to_string()]);
    }

    #[test]
    fn non_numeric_metric_value() {
        let mut doc: Value = serde_json::from_str(AWARE).unwrap();
        doc["problem"]["performance_metrics"][0]["value"] = json!("high");
        let v = validate_requirements(&doc).unwrap_err();
        assert_eq!(v, vec!["problem.performance_metrics[0].value: expected finite number, found string".to_string()]);
    }

    #[test]
    fn violations_are_exhaustive() {
        let doc = json!({"user": {"intent": 3}, "problem": [], "dataset": {}, "model": [{}]});
        let v = validate_requirements(&doc).unwrap_err();
        for needle in [
            "knowledge: missing",
            "service: missing",
            "user.intent: expected string",
            "user.expertise: missing",
            "problem: expected object",
            "dataset: expected array",
            "model[0].name: missing",
            "model[0].type: missing",
        ] {
            assert!(v.iter().any(|s| s.starts_with(needle)), "{needle} not in {v:?}");
        }
    }

    #[test]
    fn non_object_documents() {
        for doc in [json!(null), json!(1), json!("x"), json!([1, 2])] {
            assert!(!validate_requirements(&doc).unwrap_err().is_empty());
        }
    }

    #[test]
    fn unknown_keys_become_warnings() {
        let mut doc: Value = serde_json::from_str(FREE).unwrap();
        doc["extra"] = json!(1);
        doc["problem"]["priority"] = json!("high");
        let v = validate_requirements(&doc).unwrap();
        assert_eq!(v.warnings, vec!["extra: unknown key discarded", "problem.priority: unknown key discarded"]);
    }

    #[test]
    fn build_without_dataset_is_invalid() {
        let mut doc: Value = serde_json::from_str(FREE).unwrap();
        doc["dataset"] = json!([]);
        assert!(validate_requirements(&doc).unwrap_err()[0].contains("non-empty"));
        doc["user"]["intent"] = json!("consult");
        assert!(validate_requirements(&doc).is_ok());
    }

    #[test]
    fn open_tokens_preserve_unknown_values() {
        let mut doc: Value = serde_json::from_str(FREE).unwrap();
        doc["dataset"][0]["source"] = json!("s3-bucket");
        doc["user"]["intent"] = json!("explore");
        let r = validate_requirements(&doc).unwrap().requirements;
        assert_eq!(r.dataset[0].source, DataSource::Other("s3-bucket".into()));
        assert_eq!(r.user.intent, Intent::Other("explore".into()));
        assert_eq!(serde_json::to_value(&r).unwrap()["dataset"][0]["source"], json!("s3-bucket"));
    }

    #[test]
    fn direction_lookup() {
        assert_eq!(default_direction("accuracy"), Direction::AtLeast);
        assert_eq!(default_direction("F1"), Direction::AtLeast);
        assert_eq!(default_direction("RMSLE"), Direction::AtMost);
        assert_eq!(default_direction("training time"), Direction::AtMost);
        assert_eq!(default_direction("Model Size (MB)"), Direction::AtMost);
        assert_eq!(default_direction("inference latency"), Direction::AtMost);
        let c = MetricConstraint::new("accuracy", 0.9).with_direction(Direction::AtMost);
        assert_eq!(c.effective_direction(), Direction::AtMost);
    }

    #[test]
    fn extraction_variants() {
        assert_eq!(extract_json_object("```json\n{\"a\": 1}\n```"), Some("{\"a\": 1}"));
        assert_eq!(extract_json_object("Sure! {\"a\": {\"b\": \"}\"}} trailing"), Some("{\"a\": {\"b\": \"}\"}}"));
        assert_eq!(extract_json_object("```\n{\"a\": 1}\n```"), Some("{\"a\": 1}"));
        assert_eq!(extract_json_object("no json here"), None);
        assert_eq!(extract_json_object("{ unbalanced"), None);
    }

    #[test]
    fn summary_of_constraint_aware_fixture() {
        let s = summarize_requirements(&fixture(AWARE));
        assert!(s.contains("tabular classification"), "{s}");
        assert!(s.contains("banana_quality"), "{s}");
        assert!(s.contains("accuracy ≥ 0.98"), "{s}");
        assert!(!s.contains('\n'));
    }

    #[test]
    fn summary_without_constraints_has_no_constraint_clause() {
        let s = summarize_requirements(&fixture(FREE));
        assert!(!s.contains("Constraints"), "{s}");
        assert_eq!(s, summarize_requirements(&fixture(FREE)));
    }

    #[test]
    fn empty_instruction_never_calls_backend() {
        let mock = Arc::new(MockBackend::default().respond("*", AWARE));
        let gw = Gateway::new(mock.clone());
        let err = parse_requirements(&RawInstruction::new("   "), &gw, ParseOptions::default()).unwrap_err();
        assert!(matches!(err, RequirementsError::Schema { failure: SchemaFailure::EmptyInstruction, .. }));
        assert!(gw.transcript().is_empty());
        assert_eq!(mock.remaining(), 1);
    }

    #[test]
    fn parse_reproduces_fixture() {
        let gw = Gateway::new(Arc::new(MockBackend::default().respond(PARSE_TAG, format!("```json\n{AWARE}```"))));
        let parsed = parse_requirements(&RawInstruction::new("build it"), &gw, ParseOptions::default()).unwrap();
        let expected: Value = serde_json::from_str(AWARE).unwrap();
        assert_eq!(serde_json::to_value(&parsed.requirements).unwrap(), expected);
        let prompt = gw.transcript().entries()[0].prompt();
        assert!(prompt.contains("\"required\": [\"user\", \"problem\", \"dataset\", \"model\", \"knowledge\", \"service\"]"));
        assert!(prompt.contains("Your response must begin with \"```json\" or \"{\""));
    }

    #[test]
    fn parse_retries_then_succeeds() {
        let gw = Gateway::new(Arc::new(
            MockBackend::default().respond(PARSE_TAG, "{\"user\": {}}").respond(PARSE_TAG, FREE),
        ));
        let parsed = parse_requirements(&RawInstruction::new("x"), &gw, ParseOptions::default()).unwrap();
        assert_eq!(parsed.requirements, fixture(FREE));
        let entries = gw.transcript().entries();
        assert_eq!(entries.len(), 2);
        assert!(entries[1].prompt().contains("- service: missing"));
    }

    #[test]
    fn parse_gives_up_after_retries() {
        let gw = Gateway::new(Arc::new(MockBackend::default().respond(PARSE_TAG, "nope").respond(PARSE_TAG, "nope")));
        let err = parse_requirements(&RawInstruction::new("x"), &gw, ParseOptions { max_retries: 1 }).unwrap_err();
        assert!(matches!(err, RequirementsError::Schema { failure: SchemaFailure::NoJson, attempts: 2 }));
    }
}
