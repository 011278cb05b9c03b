use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, Completion, GatewayError, TokenUsage};

pub const ENV_API_KEY: &str = "AUTOML_API_KEY";
pub const ENV_BASE_URL: &str = "AUTOML_BASE_URL";
pub const ENV_MODEL: &str = "AUTOML_MODEL";

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads `AUTOML_BASE_URL`, `AUTOML_API_KEY` (falling back to
    /// `OPENAI_API_KEY`) and `AUTOML_MODEL`.
    pub fn from_env() -> Self {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.trim().is_empty());
        Self {
            base_url: var(ENV_BASE_URL).unwrap_or_else(|| DEFAULT_BASE_URL.to_string()),
            api_key: var(ENV_API_KEY).or_else(|| var("OPENAI_API_KEY")),
            model: var(ENV_MODEL).unwrap_or_else(|| DEFAULT_MODEL.to_string()),
            timeout: Duration::from_secs(300),
        }
    }
}

/// Client for any endpoint speaking the OpenAI chat-completions shape.
pub struct OpenAiCompatBackend {
    client: Client,
    config: HttpConfig,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl OpenAiCompatBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport { status: None, message: e.to_string() })?;
        Ok(Self { client, config })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl ChatBackend for OpenAiCompatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });

        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.config.timeout)
            } else {
                GatewayError::Transport { status: e.status().map(|s| s.as_u16()), message: e.to_string() }
            }
        })?;

        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let message = response.text().unwrap_or_default();
            return Err(GatewayError::RateLimited { retry_after, message });
        }
        if !status.is_success() {
            let message = response.text().unwrap_or_default();
            return Err(GatewayError::Transport { status: Some(status.as_u16()), message });
        }

        let text = response
            .text()
            .map_err(|e| GatewayError::Transport { status: Some(status.as_u16()), message: e.to_string() })?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))?;
        Ok(Completion {
            text: content,
            usage: parsed.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }

    fn name(&self) -> &str {
        "openai-compatible"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, RetryPolicy};
    use std::sync::{Arc, Mutex};
    use std::thread;

    /// Serves canned `(status, body)` responses in order and records request
    /// bodies.
    fn stub_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen_in = seen.clone();
        let handle = thread::spawn(move || {
            for (status, body) in responses {
                let mut req = server.recv().unwrap();
                let mut content = String::new();
                req.as_reader().read_to_string(&mut content).unwrap();
                seen_in.lock().unwrap().push(format!(
                    "{} {} auth={}",
                    req.url(),
                    content,
                    req.headers().iter().any(|h| h.field.equiv("Authorization"))
                ));
                req.respond(tiny_http::Response::from_string(body).with_status_code(status)).unwrap();
            }
        });
        (addr, seen, handle)
    }

    fn backend(base_url: String) -> OpenAiCompatBackend {
        OpenAiCompatBackend::new(HttpConfig {
            base_url,
            api_key: Some("sk-test".into()),
            model: "test-model".into(),
            timeout: Duration::from_secs(5),
        })
        .unwrap()
    }

    const OK_BODY: &str =
        r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":7,"completion_tokens":2}}"#;

    #[test]
    fn posts_openai_shape_and_reads_content() {
        let (addr, seen, handle) = stub_server(vec![(200, OK_BODY.into())]);
        let gw = Gateway::new(Arc::new(backend(addr)));
        let text = gw.complete(&ChatRequest::new("t").system("sys").user("hi").temperature(0.7)).unwrap();
        handle.join().unwrap();
        assert_eq!(text, "hello");
        let seen = seen.lock().unwrap();
        assert!(seen[0].starts_with("/chat/completions "));
        assert!(seen[0].contains("\"model\":\"test-model\""));
        assert!(seen[0].contains("\"role\":\"system\""));
        assert!(seen[0].ends_with("auth=true"));
        let entry = &gw.transcript().entries()[0];
        assert_eq!(entry.prompt_tokens, Some(7));
        assert_eq!(entry.completion_tokens, Some(2));
    }

    #[test]
    fn retries_429_then_succeeds() {
        let (addr, seen, handle) = stub_server(vec![(429, "slow down".into()), (200, OK_BODY.into())]);
        let gw = Gateway::new(Arc::new(backend(addr))).with_policy(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(5),
        });
        assert_eq!(gw.complete(&ChatRequest::new("t").user("hi")).unwrap(), "hello");
        handle.join().unwrap();
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn does_not_retry_400() {
        let (addr, seen, handle) = stub_server(vec![(400, "bad".into())]);
        let gw = Gateway::new(Arc::new(backend(addr))).with_policy(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(5),
        });
        let err = gw.complete(&ChatRequest::new("t").user("hi")).unwrap_err();
        handle.join().unwrap();
        assert!(matches!(err, GatewayError::Transport { status: Some(400), .. }));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn malformed_body_is_reported() {
        let (addr, _seen, handle) = stub_server(vec![(200, "{\"choices\":[]}".into())]);
        let err = backend(addr).complete(&ChatRequest::new("t").user("hi")).unwrap_err();
        handle.join().unwrap();
        assert!(matches!(err, GatewayError::MalformedResponse(_)));
    }

    #[test]
    fn connection_refused_is_transport() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let err = backend(addr).complete(&ChatRequest::new("t").user("hi")).unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }
}
