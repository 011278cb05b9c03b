use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatBackend, ChatRequest, Completion, GatewayError, RecordedError, TranscriptEntry};

#[derive(Debug, Clone)]
pub enum TagMatcher {
    Glob(glob::Pattern),
    Exact(String),
}

impl TagMatcher {
    pub fn matches(&self, tag: &str) -> bool {
        match self {
            TagMatcher::Glob(p) => p.matches(tag),
            TagMatcher::Exact(t) => t == tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockOutcome {
    Respond(String),
    Fail(RecordedError),
}

/// A scripted response. A rule serves at most one call: the first call whose
/// tag matches and whose rendered prompt contains `contains`.
#[derive(Debug, Clone)]
pub struct MockRule {
    pub tag: TagMatcher,
    pub contains: Option<String>,
    pub outcome: MockOutcome,
}

#[derive(Debug, Error)]
#[error("mock script line {line}: {message}")]
pub struct MockScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    tag: String,
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    error: Option<RecordedError>,
}

/// Deterministic scripted backend.
///
/// Rules are scanned in script order and each is consumed once. Calls that
/// run concurrently must use disjoint tags for the assignment of responses to
/// stay deterministic.
#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    consumed: Mutex<Vec<bool>>,
    replay: bool,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        let consumed = Mutex::new(vec![false; rules.len()]);
        Self { rules, consumed, replay: false }
    }

    /// Adds a rule matching `tag` as a glob pattern.
    pub fn respond(self, tag: &str, response: impl Into<String>) -> Self {
        self.push(tag, None, MockOutcome::Respond(response.into()))
    }

    pub fn respond_when(self, tag: &str, contains: &str, response: impl Into<String>) -> Self {
        self.push(tag, Some(contains.to_string()), MockOutcome::Respond(response.into()))
    }

    pub fn fail(self, tag: &str, error: &GatewayError) -> Self {
        self.push(tag, None, MockOutcome::Fail(RecordedError::from(error)))
    }

    fn push(mut self, tag: &str, contains: Option<String>, outcome: MockOutcome) -> Self {
        let tag = match glob::Pattern::new(tag) {
            Ok(p) => TagMatcher::Glob(p),
            Err(_) => TagMatcher::Exact(tag.to_string()),
        };
        self.rules.push(MockRule { tag, contains, outcome });
        self.consumed.get_mut().expect("mock state poisoned").push(false);
        self
    }

    /// Parses a line-delimited JSON script. Each line is an object with
    /// `tag` (glob), optional `contains`, and exactly one of `response` or
    /// `error`. Blank lines are ignored.
    pub fn parse_script(text: &str) -> Result<Self, MockScriptError> {
        let mut rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(raw)
                .map_err(|e| MockScriptError { line, message: e.to_string() })?;
            let outcome = match (parsed.response, parsed.error) {
                (Some(text), None) => MockOutcome::Respond(text),
                (None, Some(err)) => MockOutcome::Fail(err),
                _ => {
                    return Err(MockScriptError {
                        line,
                        message: "exactly one of `response` or `error` is required".into(),
                    })
                }
            };
            let tag = glob::Pattern::new(&parsed.tag)
                .map_err(|e| MockScriptError { line, message: format!("bad tag pattern: {e}") })?;
            rules.push(MockRule { tag: TagMatcher::Glob(tag), contains: parsed.contains, outcome });
        }
        Ok(Self::new(rules))
    }

    pub fn load_script(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MockScriptError { line: 0, message: format!("{}: {e}", path.display()) })?;
        Self::parse_script(&text)
    }

    /// Builds a replay backend serving each recorded entry once, matched by
    /// exact tag. Calls with no remaining entry fail with
    /// [`GatewayError::TranscriptMismatch`].
    pub fn from_transcript(entries: &[TranscriptEntry]) -> Self {
        let rules = entries
            .iter()
            .map(|e| MockRule {
                tag: TagMatcher::Exact(e.tag.clone()),
                contains: None,
                outcome: match (&e.response, &e.error) {
                    (Some(text), _) => MockOutcome::Respond(text.clone()),
                    (None, Some(err)) => MockOutcome::Fail(err.clone()),
                    (None, None) => MockOutcome::Respond(String::new()),
                },
            })
            .collect();
        Self { replay: true, ..Self::new(rules) }
    }

    pub fn remaining(&self) -> usize {
        self.consumed.lock().expect("mock state poisoned").iter().filter(|c| !**c).count()
    }

    /// Tags of rules never consumed, in script order.
    pub fn unconsumed_tags(&self) -> Vec<String> {
        let consumed = self.consumed.lock().expect("mock state poisoned");
        self.rules
            .iter()
            .zip(consumed.iter())
            .filter(|(_, used)| !**used)
            .map(|(rule, _)| match &rule.tag {
                TagMatcher::Glob(p) => p.as_str().to_string(),
                TagMatcher::Exact(t) => t.clone(),
            })
            .collect()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let prompt = request.rendered_prompt();
        let mut consumed = self.consumed.lock().expect("mock state poisoned");
        let hit = self.rules.iter().enumerate().find(|(idx, rule)| {
            !consumed[*idx]
                && rule.tag.matches(&request.tag)
                && rule.contains.as_deref().is_none_or(|needle| prompt.contains(needle))
        });
        let Some((idx, rule)) = hit else {
            let tag = request.tag.clone();
            return Err(if self.replay {
                GatewayError::TranscriptMismatch { tag }
            } else {
                GatewayError::MockExhausted { tag }
            });
        };
        consumed[idx] = true;
        match &rule.outcome {
            MockOutcome::Respond(text) => Ok(Completion::text(text.clone())),
            MockOutcome::Fail(err) => Err(err.to_error(&request.tag)),
        }
    }

    fn name(&self) -> &str {
        if self.replay {
            "replay"
        } else {
            "mock"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(tag: &str, text: &str) -> ChatRequest {
        ChatRequest::new(tag).user(text)
    }

    #[test]
    fn scripted_echo() {
        let mock = MockBackend::default().respond("planner/1", "PLAN-A");
        assert_eq!(mock.complete(&req("planner/1", "x")).unwrap().text, "PLAN-A");
    }

    #[test]
    fn serves_in_order_then_exhausts() {
        let mock = MockBackend::default().respond("t", "one").respond("t", "two");
        assert_eq!(mock.complete(&req("t", "x")).unwrap().text, "one");
        assert_eq!(mock.complete(&req("t", "x")).unwrap().text, "two");
        assert!(matches!(mock.complete(&req("t", "x")), Err(GatewayError::MockExhausted { .. })));
    }

    #[test]
    fn empty_script_always_exhausted() {
        let mock = MockBackend::parse_script("").unwrap();
        assert!(matches!(mock.complete(&req("any", "x")), Err(GatewayError::MockExhausted { .. })));
    }

    #[test]
    fn contains_rule_skipped_by_non_matching_prompt() {
        let script = r#"{"tag": "*", "contains": "Answer only 'Pass' or 'Fail'", "response": "Pass"}
{"tag": "*", "response": "a plan"}"#;
        let mock = MockBackend::parse_script(script).unwrap();
        let plan = mock.complete(&req("manager/plan/r0/p0", "devise an end-to-end actionable plan")).unwrap();
        assert_eq!(plan.text, "a plan");
        let verdict = mock
            .complete(&req("manager/exec_verify/r0/p0", "...\nAnswer only 'Pass' or 'Fail'"))
            .unwrap();
        assert_eq!(verdict.text, "Pass");
    }

    #[test]
    fn glob_tags() {
        let mock = MockBackend::default().respond("data/*/r0/p?", "D");
        assert!(mock.complete(&req("data/decompose/r0/p1", "x")).is_ok());
        assert!(mock.complete(&req("model/decompose/r0/p1", "x")).is_err());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = MockBackend::parse_script("{\"tag\":\"a\",\"response\":\"b\"}\nnot json").unwrap_err();
        assert_eq!(err.line, 2);
        let err = MockBackend::parse_script(r#"{"tag":"a"}"#).unwrap_err();
        assert!(err.message.contains("exactly one"));
        let err = MockBackend::parse_script(r#"{"tag":"a","response":"x","extra":1}"#).unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn scripted_errors() {
        let script = r#"{"tag":"a","error":{"kind":"transport","message":"boom","status":400}}"#;
        let mock = MockBackend::parse_script(script).unwrap();
        let err = mock.complete(&req("a", "x")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { status: Some(400), .. }));
    }
}
