use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, GatewayError};

/// One backend call as seen by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub tag: String,
    pub request_digest: String,
    pub messages: Vec<ChatMessage>,
    pub response: Option<String>,
    pub error: Option<RecordedError>,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl TranscriptEntry {
    pub fn prompt(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }
}

/// Serializable form of a [`GatewayError`], used in transcripts and mock
/// scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedError {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
}

impl From<&GatewayError> for RecordedError {
    fn from(err: &GatewayError) -> Self {
        let (kind, status) = match err {
            GatewayError::InvalidRequest(_) => ("invalid_request", None),
            GatewayError::Timeout(_) => ("timeout", None),
            GatewayError::Transport { status, .. } => ("transport", *status),
            GatewayError::RateLimited { .. } => ("rate_limited", Some(429)),
            GatewayError::MalformedResponse(_) => ("malformed_response", None),
            GatewayError::MockExhausted { .. } => ("mock_exhausted", None),
            GatewayError::TranscriptMismatch { .. } => ("transcript_mismatch", None),
        };
        Self { kind: kind.to_string(), message: err.to_string(), status }
    }
}

impl RecordedError {
    /// Rebuilds the error for replay. Unknown kinds become transport errors.
    pub fn to_error(&self, tag: &str) -> GatewayError {
        match self.kind.as_str() {
            "invalid_request" => GatewayError::InvalidRequest(self.message.clone()),
            "timeout" => GatewayError::Timeout(Duration::ZERO),
            "rate_limited" => GatewayError::RateLimited { retry_after: None, message: self.message.clone() },
            "malformed_response" => GatewayError::MalformedResponse(self.message.clone()),
            "mock_exhausted" => GatewayError::MockExhausted { tag: tag.to_string() },
            "transcript_mismatch" => GatewayError::TranscriptMismatch { tag: tag.to_string() },
            _ => GatewayError::Transport { status: self.status, message: self.message.clone() },
        }
    }
}

/// Append-only call log. Entries carry a sequence number equal to their
/// position; when a sink is attached every entry is also streamed to it as
/// one JSON line.
#[derive(Default)]
pub struct Transcript {
    entries: Mutex<Vec<TranscriptEntry>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

impl Transcript {
    pub fn with_sink(path: &Path) -> std::io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self { entries: Mutex::default(), sink: Mutex::new(Some(BufWriter::new(file))) })
    }

    pub(crate) fn append(&self, mut entry: TranscriptEntry) {
        let mut entries = self.entries.lock().expect("transcript poisoned");
        entry.seq = entries.len() as u64;
        if let Some(sink) = self.sink.lock().expect("transcript sink poisoned").as_mut() {
            let line = serde_json::to_string(&entry).expect("transcript entries serialize");
            if let Err(err) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                tracing::warn!(error = %err, "failed to write transcript entry");
            }
        }
        entries.push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_tagged(&self, prefix: &str) -> usize {
        self.entries.lock().expect("transcript poisoned").iter().filter(|e| e.tag.starts_with(prefix)).count()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for entry in self.entries.lock().expect("transcript poisoned").iter() {
            writeln!(out, "{}", serde_json::to_string(entry).map_err(std::io::Error::other)?)?;
        }
        out.flush()
    }

    pub fn load_jsonl(path: &Path) -> std::io::Result<Vec<TranscriptEntry>> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", idx + 1))
            })?;
            entries.push(entry);
        }
        Ok(entries)
    }
}
