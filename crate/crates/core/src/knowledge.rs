//! Retrieval half of retrieval-augmented planning.
//!
//! Each enabled source is queried, its hits are summarized by the manager
//! agent, and the summaries are merged into one digest that fills the
//! planning prompt's knowledge slot. Source failures only ever shrink the
//! bundle.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, DETERMINISTIC_TEMPERATURE};
use crate::prompts::{self, ids, AgentRole, Slots};
use crate::requirements::{summarize_requirements, UserRequirements};
use crate::util::{fan_out, truncate_chars};

/// Aggregate used when no source contributed anything.
pub const FALLBACK_KNOWLEDGE: &str =
    "No external knowledge was retrieved for this task; rely on internal knowledge of current best practices.";

/// Dataset context used when no metadata could be retrieved.
pub const FALLBACK_DATASET_CONTEXT: &str =
    "No dataset metadata was retrieved; rely on internal knowledge about datasets of this kind.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceId {
    WebSearch,
    Arxiv,
    Kaggle,
    #[serde(rename = "paperswithcode")]
    PapersWithCode,
}

impl SourceId {
    pub const ALL: [SourceId; 4] = [SourceId::WebSearch, SourceId::Arxiv, SourceId::Kaggle, SourceId::PapersWithCode];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceId::WebSearch => "web_search",
            SourceId::Arxiv => "arxiv",
            SourceId::Kaggle => "kaggle",
            SourceId::PapersWithCode => "paperswithcode",
        }
    }

    fn summary_slot(self) -> &'static str {
        match self {
            SourceId::WebSearch => "search_summary",
            SourceId::Arxiv => "arxiv_summary",
            SourceId::Kaggle => "kaggle_summary",
            SourceId::PapersWithCode => "pwc_summary",
        }
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "web_search" | "web" | "search" => Ok(SourceId::WebSearch),
            "arxiv" => Ok(SourceId::Arxiv),
            "kaggle" => Ok(SourceId::Kaggle),
            "paperswithcode" | "pwc" => Ok(SourceId::PapersWithCode),
            other => Err(format!("unknown knowledge source `{other}`")),
        }
    }
}

/// Where a source's hits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceProvider {
    /// Text files under `<dir>/<source id>/`, one document each, in file
    /// name order.
    Stub { dir: PathBuf },
    /// The public arXiv Atom query API.
    Arxiv { base_url: String },
    /// A JSON endpoint answering `GET ?q=<query>&n=<count>` with
    /// `{"results": [{"title": ..., "snippet": ...}]}`.
    JsonSearch { endpoint: String },
}

pub const ARXIV_API: &str = "http://export.arxiv.org/api/query";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSource {
    pub id: SourceId,
    pub enabled: bool,
    pub timeout: Duration,
    pub max_hits: usize,
    pub char_budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<SourceProvider>,
}

impl KnowledgeSource {
    pub fn new(id: SourceId) -> Self {
        let provider = match id {
            SourceId::Arxiv => Some(SourceProvider::Arxiv { base_url: ARXIV_API.into() }),
            _ => None,
        };
        Self { id, enabled: false, timeout: Duration::from_secs(30), max_hits: 5, char_budget: 8000, provider }
    }

    pub fn enabled(mut self, enabled: bool) -> Self {
        self.enabled = enabled;
        self
    }

    pub fn with_provider(mut self, provider: SourceProvider) -> Self {
        self.provider = Some(provider);
        self
    }

    /// Every source, all disabled.
    pub fn defaults() -> Vec<KnowledgeSource> {
        SourceId::ALL.into_iter().map(KnowledgeSource::new).collect()
    }

    pub fn client(&self) -> Option<Arc<dyn SourceClient>> {
        match self.provider.as_ref()? {
            SourceProvider::Stub { dir } => Some(Arc::new(StubSource { dir: dir.join(self.id.as_str()) })),
            SourceProvider::Arxiv { base_url } => Some(Arc::new(ArxivClient { base_url: base_url.clone() })),
            SourceProvider::JsonSearch { endpoint } => Some(Arc::new(JsonSearchClient { endpoint: endpoint.clone() })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SourceError {
    #[error("source timed out")]
    Timeout,
    #[error("source transport error: {0}")]
    Transport(String),
}

pub trait SourceClient: Send + Sync {
    fn search(&self, query: &str, max_hits: usize, timeout: Duration) -> Result<Vec<Document>, SourceError>;
}

pub struct StubSource {
    pub dir: PathBuf,
}

impl SourceClient for StubSource {
    fn search(&self, _query: &str, max_hits: usize, _timeout: Duration) -> Result<Vec<Document>, SourceError> {
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(SourceError::Transport(format!("{}: {e}", self.dir.display()))),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .take(max_hits)
            .map(|p| {
                let text = std::fs::read_to_string(&p).map_err(|e| SourceError::Transport(e.to_string()))?;
                let title = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(Document { title, text: text.trim().to_string() })
            })
            .collect()
    }
}

fn http_get(url: &str, params: &[(&str, String)], timeout: Duration) -> Result<String, SourceError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| SourceError::Transport(e.to_string()))?;
    let response = client.get(url).query(params).send().map_err(|e| {
        if e.is_timeout() {
            SourceError::Timeout
        } else {
            SourceError::Transport(e.to_string())
        }
    })?;
    let status = response.status();
    if !status.is_success() {
        return Err(SourceError::Transport(format!("HTTP {status}")));
    }
    response.text().map_err(|e| if e.is_timeout() { SourceError::Timeout } else { SourceError::Transport(e.to_string()) })
}

pub struct ArxivClient {
    pub base_url: String,
}

impl SourceClient for ArxivClient {
    fn search(&self, query: &str, max_hits: usize, timeout: Duration) -> Result<Vec<Document>, SourceError> {
        let params = [("search_query", format!("all:{query}")), ("start", "0".into()), ("max_results", max_hits.to_string())];
        let body = http_get(&self.base_url, &params, timeout)?;
        Ok(parse_atom(&body).into_iter().take(max_hits).collect())
    }
}

/// Title and summary of every `<entry>` in an Atom feed.
pub fn parse_atom(xml: &str) -> Vec<Document> {
    static RE: OnceLock<(Regex, Regex, Regex)> = OnceLock::new();
    let (entry, title, summary) = RE.get_or_init(|| {
        (
            Regex::new(r"(?s)<entry>(.*?)</entry>").expect("entry regex"),
            Regex::new(r"(?s)<title[^>]*>(.*?)</title>").expect("title regex"),
            Regex::new(r"(?s)<summary[^>]*>(.*?)</summary>").expect("summary regex"),
        )
    });
    let clean = |s: &str| {
        let unescaped = s.replace("&lt;", "<").replace("&gt;", ">").replace("&quot;", "\"").replace("&apos;", "'").replace("&amp;", "&");
        unescaped.split_whitespace().collect::<Vec<_>>().join(" ")
    };
    entry
        .captures_iter(xml)
        .map(|c| {
            let body = &c[1];
            Document {
                title: title.captures(body).map(|t| clean(&t[1])).unwrap_or_default(),
                text: summary.captures(body).map(|t| clean(&t[1])).unwrap_or_default(),
            }
        })
        .collect()
}

pub struct JsonSearchClient {
    pub endpoint: String,
}

#[derive(Deserialize)]
struct SearchResponse {
    #[serde(default)]
    results: Vec<SearchHit>,
}

#[derive(Deserialize)]
struct SearchHit {
    #[serde(default)]
    title: String,
    #[serde(default)]
    snippet: String,
}

impl SourceClient for JsonSearchClient {
    fn search(&self, query: &str, max_hits: usize, timeout: Duration) -> Result<Vec<Document>, SourceError> {
        let body = http_get(&self.endpoint, &[("q", query.to_string()), ("n", max_hits.to_string())], timeout)?;
        let parsed: SearchResponse =
            serde_json::from_str(&body).map_err(|e| SourceError::Transport(format!("bad search response: {e}")))?;
        Ok(parsed.results.into_iter().take(max_hits).map(|h| Document { title: h.title, text: h.snippet }).collect())
    }
}

/// Per-source query text plus the keyword slots its prompt shows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceQuery {
    pub text: String,
    pub slots: BTreeMap<String, String>,
}

fn join_words(parts: &[&str]) -> String {
    parts.iter().map(|p| p.trim()).filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Queries for every source. Empty requirement fields are dropped.
pub fn build_queries(r: &UserRequirements) -> BTreeMap<SourceId, SourceQuery> {
    let task = r.problem.downstream_task.trim();
    let domain = r.problem.application_domain.trim();
    let area = r.problem.area.trim();
    let slots = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let web = join_words(&[task, domain]);
    BTreeMap::from([
        (SourceId::Kaggle, SourceQuery { text: join_words(&[task, domain]), slots: slots(&[("user_task", task), ("user_domain", domain)]) }),
        (
            SourceId::PapersWithCode,
            SourceQuery { text: join_words(&[area, task]), slots: slots(&[("user_area", area), ("user_task", task)]) },
        ),
        (SourceId::Arxiv, SourceQuery { text: join_words(&[task, domain]), slots: slots(&[("task_kw", task), ("domain_kw", domain)]) }),
        (SourceId::WebSearch, SourceQuery { text: web.clone(), slots: slots(&[("search_query", web.as_str())]) }),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    pub context: String,
    pub warning: Option<String>,
}

/// Concatenated hits, truncated to the source's budget. Errors degrade to
/// an empty context with a warning.
pub fn fetch(source: &KnowledgeSource, client: &dyn SourceClient, query: &str) -> FetchResult {
    match client.search(query, source.max_hits, source.timeout) {
        Ok(docs) => {
            let joined = docs
                .iter()
                .filter(|d| !d.text.trim().is_empty() || !d.title.trim().is_empty())
                .map(|d| if d.title.is_empty() { d.text.clone() } else { format!("## {}\n{}", d.title, d.text) })
                .collect::<Vec<_>>()
                .join("\n\n");
            FetchResult { context: truncate_chars(&joined, source.char_budget), warning: None }
        }
        Err(e) => {
            tracing::warn!(source = %source.id, error = %e, "knowledge source degraded to empty context");
            FetchResult { context: String::new(), warning: Some(format!("{}: {e}", source.id)) }
        }
    }
}

fn source_template(id: SourceId) -> &'static str {
    match id {
        SourceId::WebSearch => ids::RETRIEVAL_WEB_SEARCH,
        SourceId::Arxiv => ids::RETRIEVAL_ARXIV,
        SourceId::Kaggle => ids::RETRIEVAL_KAGGLE,
        SourceId::PapersWithCode => ids::RETRIEVAL_PAPERSWITHCODE,
    }
}

pub fn summary_tag(id: SourceId) -> String {
    format!("manager/knowledge/{id}")
}

pub const AGGREGATE_TAG: &str = "manager/knowledge/summary";

/// Summarizes one source's hits through its retrieval prompt. The caller
/// skips sources with empty context.
pub fn summarize_source(
    id: SourceId,
    context: &str,
    query: &SourceQuery,
    requirement_summary: &str,
    gateway: &Gateway,
) -> Result<String, GatewayError> {
    let mut slots: Slots<'_> = query.slots.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    slots.insert("context", context);
    slots.insert("user_requirement_summary", requirement_summary);
    let prompt = prompts::render(source_template(id), &slots).expect("retrieval slots are complete");
    let request = ChatRequest::new(summary_tag(id))
        .system(AgentRole::Manager.system_prompt())
        .user(prompt)
        .temperature(DETERMINISTIC_TEMPERATURE);
    Ok(gateway.complete(&request)?.trim().to_string())
}

/// Immutable result of retrieval.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    pub per_source: BTreeMap<SourceId, String>,
    pub aggregate: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl KnowledgeBundle {
    pub fn fallback() -> Self {
        Self { per_source: BTreeMap::new(), aggregate: FALLBACK_KNOWLEDGE.to_string(), warnings: Vec::new() }
    }
}

/// Merges per-source summaries through the summary prompt, keeping only the
/// sections of sources that are present.
pub fn aggregate(
    per_source: BTreeMap<SourceId, String>,
    requirement_summary: &str,
    gateway: &Gateway,
) -> Result<KnowledgeBundle, GatewayError> {
    if per_source.values().all(|s| s.trim().is_empty()) {
        return Ok(KnowledgeBundle { per_source, ..KnowledgeBundle::fallback() });
    }
    let mut slots: Slots<'_> = per_source
        .iter()
        .filter(|(_, s)| !s.trim().is_empty())
        .map(|(id, s)| (id.summary_slot(), s.as_str()))
        .collect();
    slots.insert("user_requirement_summary", requirement_summary);
    let optional: Vec<&str> = SourceId::ALL.iter().map(|id| id.summary_slot()).collect();
    let prompt = prompts::PromptCatalog::builtin()
        .get(ids::RETRIEVAL_SUMMARY)
        .and_then(|t| t.render_omitting(&slots, &optional))
        .expect("summary template renders with any subset of sources");
    let request = ChatRequest::new(AGGREGATE_TAG)
        .system(AgentRole::Manager.system_prompt())
        .user(prompt)
        .temperature(DETERMINISTIC_TEMPERATURE);
    let aggregate = gateway.complete(&request)?.trim().to_string();
    Ok(KnowledgeBundle { per_source, aggregate, warnings: Vec::new() })
}

/// Full retrieval: per-source fetch and summary run concurrently, then one
/// aggregation call.
pub fn retrieve(
    r: &UserRequirements,
    sources: &[KnowledgeSource],
    workers: usize,
    gateway: &Gateway,
) -> Result<KnowledgeBundle, GatewayError> {
    let summary = summarize_requirements(r);
    let queries = build_queries(r);
    let mut warnings = Vec::new();
    let mut active = Vec::new();
    for source in sources.iter().filter(|s| s.enabled) {
        match source.client() {
            Some(client) => active.push((source, client)),
            None => warnings.push(format!("{}: enabled but no provider configured", source.id)),
        }
    }

    let results = fan_out(&active, workers, |(source, client)| {
        let query = &queries[&source.id];
        let fetched = fetch(source, client.as_ref(), &query.text);
        if fetched.context.trim().is_empty() {
            let warning = fetched.warning.or_else(|| Some(format!("{}: no hits", source.id)));
            return Ok((source.id, None, warning));
        }
        match summarize_source(source.id, &fetched.context, query, &summary, gateway) {
            Ok(text) => Ok((source.id, Some(text), fetched.warning)),
            Err(e) if e.is_harness_error() => Err(e),
            Err(e) => {
                tracing::warn!(source = %source.id, error = %e, "source summary failed");
                Ok((source.id, None, Some(format!("{}: summary failed: {e}", source.id))))
            }
        }
    });

    let mut per_source = BTreeMap::new();
    for result in results {
        let (id, text, warning) = result?;
        warnings.extend(warning);
        if let Some(text) = text.filter(|t| !t.is_empty()) {
            per_source.insert(id, text);
        }
    }

    let mut bundle = match aggregate(per_source.clone(), &summary, gateway) {
        Ok(bundle) => bundle,
        Err(e) if e.is_harness_error() => return Err(e),
        Err(e) => {
            tracing::warn!(error = %e, "knowledge aggregation failed; concatenating source summaries");
            warnings.push(format!("aggregation failed: {e}"));
            let aggregate = per_source.iter().map(|(id, s)| format!("[{id}] {s}")).collect::<Vec<_>>().join("\n\n");
            KnowledgeBundle { per_source, aggregate, warnings: Vec::new() }
        }
    };
    bundle.warnings = warnings;
    Ok(bundle)
}

/// Context about the requested datasets for the data agent: what the
/// requirements say, plus metadata fetched from the kaggle source with the
/// dataset name as query when that source is enabled.
pub fn dataset_context(r: &UserRequirements, sources: &[KnowledgeSource]) -> String {
    let mut sections = Vec::new();
    for d in &r.dataset {
        let mut line = format!("- {} (source: {})", d.name, d.source);
        if !d.description.trim().is_empty() {
            line.push_str(&format!(": {}", d.description.trim()));
        }
        sections.push(line);
    }
    let kaggle = sources.iter().find(|s| s.enabled && s.id == SourceId::Kaggle);
    let mut metadata = Vec::new();
    if let Some((source, client)) = kaggle.and_then(|s| s.client().map(|c| (s, c))) {
        for d in r.dataset.iter().filter(|d| !d.name.trim().is_empty()) {
            let fetched = fetch(source, client.as_ref(), d.name.trim());
            if !fetched.context.trim().is_empty() {
                metadata.push(format!("Metadata for {}:\n{}", d.name, fetched.context));
            }
        }
    }
    if metadata.is_empty() {
        sections.push(FALLBACK_DATASET_CONTEXT.to_string());
    } else {
        sections.extend(metadata);
    }
    sections.join("\n")
}
