//! Uniform chat-completion interface.
//!
//! Every agent call goes through a [`Gateway`], which validates the request,
//! applies the retry policy around a [`ChatBackend`] and appends exactly one
//! [`TranscriptEntry`] per call, successful or not. Backends are either the
//! OpenAI-compatible HTTP client ([`OpenAiCompatBackend`]) or the scripted
//! [`MockBackend`] used for tests and transcript replay.

mod http;
mod mock;
mod transcript;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{OpenAiCompatBackend, HttpConfig, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
pub use mock::{MockBackend, MockOutcome, MockRule, TagMatcher};
pub use transcript::{RecordedError, Transcript, TranscriptEntry};

/// Sampling temperature for planning and pseudo execution.
pub const CREATIVE_TEMPERATURE: f32 = 0.7;
/// Sampling temperature for parsing, verification and code generation.
pub const DETERMINISTIC_TEMPERATURE: f32 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// A single chat-completion request. `tag` names the agent role and stage
/// (`manager/plan/r0/p1`) and is what mock scripts and transcripts key on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub tag: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            messages: Vec::new(),
            temperature: DETERMINISTIC_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn system(mut self, content: impl Into<String>) -> Self {
        self.messages.push(ChatMessage::system(content));
        self
    }

    pub fn user(mut self, content: impl Into<String>) -> Self {
        self.messages.push(ChatMessage::user(content));
        self
    }

    pub fn assistant(mut self, content: impl Into<String>) -> Self {
        self.messages.push(ChatMessage::assistant(content));
        self
    }

    pub fn temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// All message contents joined by blank lines; what mock `contains`
    /// rules are matched against.
    pub fn rendered_prompt(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Hex SHA-256 over the canonical JSON of messages and sampling settings.
    pub fn digest(&self) -> String {
        let canonical = serde_json::json!({
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut hasher = Sha256::new();
        hasher.update(canonical.to_string().as_bytes());
        hex::encode(hasher.finalize())
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        for (idx, msg) in self.messages.iter().enumerate() {
            if msg.role != Role::Assistant && msg.content.trim().is_empty() {
                return Err(GatewayError::InvalidRequest(format!(
                    "message {idx} ({}) has empty content",
                    msg.role.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), usage: None }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("call timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("rate limited: {message}")]
    RateLimited { retry_after: Option<Duration>, message: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("mock script exhausted for tag `{tag}`")]
    MockExhausted { tag: String },
    #[error("transcript has no remaining entry for tag `{tag}`")]
    TranscriptMismatch { tag: String },
}

impl GatewayError {
    /// Rate limits, timeouts, connection failures and 5xx responses are
    /// retried; everything else fails immediately.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::RateLimited { .. } | GatewayError::Timeout(_) => true,
            GatewayError::Transport { status: None, .. } => true,
            GatewayError::Transport { status: Some(s), .. } => *s == 429 || *s >= 500,
            _ => false,
        }
    }

    /// Exhausted mocks and transcript mismatches signal a broken script or
    /// replay, never a degraded backend.
    pub fn is_harness_error(&self) -> bool {
        matches!(self, GatewayError::MockExhausted { .. } | GatewayError::TranscriptMismatch { .. })
    }
}

/// A chat-completion provider. Implementations must be shareable across the
/// concurrent plan workers.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;

    fn name(&self) -> &str;
}

/// Exponential backoff: attempt `n` (0-based) waits `base * 2^n`, capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_attempts: 1, ..Self::default() }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Shared handle used by every agent. Cheap to share by reference across
/// scoped worker threads.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    policy: RetryPolicy,
    transcript: Transcript,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("policy", &self.policy)
            .field("calls", &self.transcript.len())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend, policy: RetryPolicy::default(), transcript: Transcript::default() }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = transcript;
        self
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Sends `request`, retrying retryable failures, and returns the
    /// assistant text. Invalid requests fail before reaching the backend and
    /// are not recorded.
    pub fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;

        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.backend.complete(request) {
                Ok(done) => break Ok(done),
                Err(err) if err.is_retryable() && attempts < self.policy.max_attempts => {
                    let mut wait = self.policy.delay_for(attempts - 1);
                    if let GatewayError::RateLimited { retry_after: Some(after), .. } = &err {
                        wait = wait.max(*after).min(self.policy.max_delay);
                    }
                    tracing::warn!(tag = %request.tag, attempt = attempts, error = %err, "retrying backend call");
                    std::thread::sleep(wait);
                }
                Err(err) => break Err(err),
            }
        };

        let entry = TranscriptEntry {
            seq: 0,
            tag: request.tag.clone(),
            request_digest: request.digest(),
            messages: request.messages.clone(),
            response: result.as_ref().ok().map(|c| c.text.clone()),
            error: result.as_ref().err().map(RecordedError::from),
            latency_ms: started.elapsed().as_millis() as u64,
            attempts,
            prompt_tokens: result.as_ref().ok().and_then(|c| c.usage).map(|u| u.prompt_tokens),
            completion_tokens: result
                .as_ref()
                .ok()
                .and_then(|c| c.usage)
                .map(|u| u.completion_tokens),
        };
        self.transcript.append(entry);

        result.map(|c| c.text)
    }
}
