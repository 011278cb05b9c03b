//! Agent system prompts and the prompt template catalog.
//!
//! Prompt bodies live as text files under `prompts/` at the repository root
//! and are embedded at compile time. Placeholders use brace syntax: `{name}`
//! is a slot, `{{` and `}}` are literal braces, and `{num2words(name)}`
//! renders the integer slot `name` as an English cardinal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slot values keyed by slot name.
pub type Slots<'a> = BTreeMap<&'a str, &'a str>;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing slot `{0}`")]
    MissingSlot(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("unknown agent role `{0}`")]
    UnknownRole(String),
    #[error("slot `{slot}` must be a positive integer for {helper}, got `{value}`")]
    BadHelperArgument { helper: String, slot: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Manager,
    Prompt,
    Data,
    Model,
    Operation,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] =
        [AgentRole::Manager, AgentRole::Prompt, AgentRole::Data, AgentRole::Model, AgentRole::Operation];

    pub fn id(self) -> &'static str {
        match self {
            AgentRole::Manager => "manager",
            AgentRole::Prompt => "prompt",
            AgentRole::Data => "data",
            AgentRole::Model => "model",
            AgentRole::Operation => "operation",
        }
    }

    pub fn system_prompt(self) -> &'static str {
        let raw = match self {
            AgentRole::Manager => include_str!("../../../prompts/system_manager.txt"),
            AgentRole::Prompt => include_str!("../../../prompts/system_prompt.txt"),
            AgentRole::Data => include_str!("../../../prompts/system_data.txt"),
            AgentRole::Model => include_str!("../../../prompts/system_model.txt"),
            AgentRole::Operation => include_str!("../../../prompts/system_operation.txt"),
        };
        strip_final_newline(raw)
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AgentRole {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.id() == s)
            .ok_or_else(|| PromptError::UnknownRole(s.to_string()))
    }
}

/// System prompt text for a role id (`manager`, `prompt`, `data`, `model`,
/// `operation`).
pub fn system_prompt_for(role: &str) -> Result<&'static str, PromptError> {
    role.parse::<AgentRole>().map(AgentRole::system_prompt)
}

/// Template ids. The first group reproduces the published prompt catalog;
/// the `local` group covers steps whose prompts were never shown.
pub mod ids {
    pub const RETRIEVAL_KAGGLE: &str = "retrieval_kaggle";
    pub const RETRIEVAL_PAPERSWITHCODE: &str = "retrieval_paperswithcode";
    pub const RETRIEVAL_ARXIV: &str = "retrieval_arxiv";
    pub const RETRIEVAL_WEB_SEARCH: &str = "retrieval_web_search";
    pub const RETRIEVAL_SUMMARY: &str = "retrieval_summary";
    pub const PLANNING: &str = "planning";
    pub const PLAN_REVISION: &str = "plan_revision";
    pub const DECOMPOSE_DATA: &str = "decompose_data";
    pub const DECOMPOSE_MODEL: &str = "decompose_model";
    pub const PSEUDO_DATA_ANALYSIS: &str = "pseudo_data_analysis";
    pub const MODEL_SEARCH_HPO: &str = "model_search_hpo";
    pub const REQUEST_RELEVANCY: &str = "request_relevancy";
    pub const REQUEST_ADEQUACY: &str = "request_adequacy";
    pub const EXEC_VERIFICATION: &str = "exec_verification";
    pub const IMPL_VERIFICATION: &str = "impl_verification";
    pub const PROMPT_AGENT_SYSTEM: &str = "prompt_agent_system";

    pub const SELECT_BEST: &str = "select_best";
    pub const CODE_GENERATION: &str = "code_generation";
    pub const CODE_FENCE_REMINDER: &str = "code_fence_reminder";
    pub const PARSE_RETRY: &str = "parse_retry";
    pub const IMPLEMENTATION_INSTRUCTION: &str = "implementation_instruction";
}

const CATALOG_SOURCES: &[(&str, &str, bool)] = &[
    (ids::RETRIEVAL_KAGGLE, include_str!("../../../prompts/retrieval_kaggle.txt"), true),
    (ids::RETRIEVAL_PAPERSWITHCODE, include_str!("../../../prompts/retrieval_paperswithcode.txt"), true),
    (ids::RETRIEVAL_ARXIV, include_str!("../../../prompts/retrieval_arxiv.txt"), true),
    (ids::RETRIEVAL_WEB_SEARCH, include_str!("../../../prompts/retrieval_web_search.txt"), true),
    (ids::RETRIEVAL_SUMMARY, include_str!("../../../prompts/retrieval_summary.txt"), true),
    (ids::PLANNING, include_str!("../../../prompts/planning.txt"), true),
    (ids::PLAN_REVISION, include_str!("../../../prompts/plan_revision.txt"), true),
    (ids::DECOMPOSE_DATA, include_str!("../../../prompts/decompose_data.txt"), true),
    (ids::DECOMPOSE_MODEL, include_str!("../../../prompts/decompose_model.txt"), true),
    (ids::PSEUDO_DATA_ANALYSIS, include_str!("../../../prompts/pseudo_data_analysis.txt"), true),
    (ids::MODEL_SEARCH_HPO, include_str!("../../../prompts/model_search_hpo.txt"), true),
    (ids::REQUEST_RELEVANCY, include_str!("../../../prompts/request_relevancy.txt"), true),
    (ids::REQUEST_ADEQUACY, include_str!("../../../prompts/request_adequacy.txt"), true),
    (ids::EXEC_VERIFICATION, include_str!("../../../prompts/exec_verification.txt"), true),
    (ids::IMPL_VERIFICATION, include_str!("../../../prompts/impl_verification.txt"), true),
    (ids::PROMPT_AGENT_SYSTEM, include_str!("../../../prompts/system_prompt.txt"), true),
    (ids::SELECT_BEST, include_str!("../../../prompts/local/select_best.txt"), false),
    (ids::CODE_GENERATION, include_str!("../../../prompts/local/code_generation.txt"), false),
    (ids::CODE_FENCE_REMINDER, include_str!("../../../prompts/local/code_fence_reminder.txt"), false),
    (ids::PARSE_RETRY, include_str!("../../../prompts/local/parse_retry.txt"), false),
    (
        ids::IMPLEMENTATION_INSTRUCTION,
        include_str!("../../../prompts/local/implementation_instruction.txt"),
        false,
    ),
];

fn strip_final_newline(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
    NumberWords { raw: String, slot: String },
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    id: String,
    body: String,
    segments: Vec<Segment>,
    published: bool,
}

impl PromptTemplate {
    pub fn parse(id: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let segments = parse_segments(&body);
        Self { id: id.into(), body, segments, published: false }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// The raw template text with placeholders unresolved.
    pub fn body(&self) -> &str {
        &self.body
    }

    /// Whether this template reproduces a published prompt verbatim.
    pub fn is_published(&self) -> bool {
        self.published
    }

    /// Every placeholder as written between braces, e.g. `user_requirements`
    /// or `num2words(k)`.
    pub fn required_slots(&self) -> BTreeSet<String> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.clone()),
                Segment::NumberWords { raw, .. } => Some(raw.clone()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Names that must be present in the slot map to render.
    pub fn required_inputs(&self) -> BTreeSet<String> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) | Segment::NumberWords { slot: name, .. } => Some(name.clone()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Substitutes every placeholder. Values are inserted verbatim.
    pub fn render(&self, slots: &Slots<'_>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(name) => {
                    let value = slots.get(name.as_str()).ok_or_else(|| PromptError::MissingSlot(name.clone()))?;
                    out.push_str(value);
                }
                Segment::NumberWords { slot, .. } => {
                    let value = slots.get(slot.as_str()).ok_or_else(|| PromptError::MissingSlot(slot.clone()))?;
                    let n: u64 = value.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
                        PromptError::BadHelperArgument {
                            helper: "num2words".into(),
                            slot: slot.clone(),
                            value: value.to_string(),
                        }
                    })?;
                    out.push_str(&number_words(n));
                }
            }
        }
        Ok(out)
    }

    /// Renders after dropping every blank-line-separated block that contains
    /// a placeholder for one of `optional` that is absent from `slots`.
    pub fn render_omitting(&self, slots: &Slots<'_>, optional: &[&str]) -> Result<String, PromptError> {
        let absent: Vec<&str> = optional.iter().copied().filter(|name| !slots.contains_key(name)).collect();
        if absent.is_empty() {
            return self.render(slots);
        }
        let kept: Vec<&str> = self
            .body
            .split("\n\n")
            .filter(|block| !absent.iter().any(|name| block.contains(&format!("{{{name}}}"))))
            .collect();
        PromptTemplate::parse(self.id.clone(), kept.join("\n\n")).render(slots)
    }
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            literal.push('{');
            rest = &rest[2..];
        } else if rest.starts_with("}}") {
            literal.push('}');
            rest = &rest[2..];
        } else if c == '{' {
            match rest[1..].find(['{', '}']) {
                Some(end) if rest[1 + end..].starts_with('}') && end > 0 => {
                    let inner = &rest[1..1 + end];
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(placeholder(inner));
                    rest = &rest[end + 2..];
                }
                _ => {
                    literal.push('{');
                    rest = &rest[1..];
                }
            }
        } else {
            literal.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

fn placeholder(inner: &str) -> Segment {
    if let Some(arg) = inner.strip_prefix("num2words(").and_then(|s| s.strip_suffix(')')) {
        return Segment::NumberWords { raw: inner.to_string(), slot: arg.trim().to_string() };
    }
    Segment::Slot(inner.to_string())
}

/// English cardinal for 1..=20, decimal digits beyond.
pub fn number_words(n: u64) -> String {
    const WORDS: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
        "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
    ];
    WORDS.get(n as usize).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Immutable set of all templates, loaded once.
#[derive(Debug)]
pub struct PromptCatalog {
    templates: BTreeMap<String, PromptTemplate>,
}

impl PromptCatalog {
    pub fn builtin() -> &'static PromptCatalog {
        static CATALOG: OnceLock<PromptCatalog> = OnceLock::new();
        CATALOG.get_or_init(|| {
            let templates = CATALOG_SOURCES
                .iter()
                .map(|(id, body, published)| {
                    let mut t = PromptTemplate::parse(*id, strip_final_newline(body));
                    t.published = *published;
                    (id.to_string(), t)
                })
                .collect();
            PromptCatalog { templates }
        })
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(id).ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }
}

/// Renders a catalog template by id.
pub fn render(template_id: &str, slots: &Slots<'_>) -> Result<String, PromptError> {
    PromptCatalog::builtin().get(template_id)?.render(slots)
}
