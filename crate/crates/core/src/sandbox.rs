//! Subprocess execution of generated pipelines and result-line parsing.
//!
//! The script runs in its own process group with a cleared environment.
//! At the deadline the whole group receives SIGTERM, then SIGKILL after the
//! grace period.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use wait_timeout::ChildExt;

pub const RESULT_PREFIX: &str = "AUTOML_RESULT ";
pub const PERFORMANCE_PREFIX: &str = "Model Performance on Test Set: ";
pub const COMPLEXITY_PREFIX: &str = "Model Complexity: ";
pub const ENDPOINT_PREFIXES: [&str; 2] = ["Deployment URL: ", "Gradio URL Endpoint: "];

/// Variable the sandbox sets to the configured dataset location.
pub const DATASET_ENV: &str = "AUTOML_DATASET_PATH";

pub const SCRIPT_FILE: &str = "main.py";
pub const STDOUT_FILE: &str = "stdout.log";
pub const STDERR_FILE: &str = "stderr.log";
pub const RESULT_FILE: &str = "result.json";

const TRUNCATION_MARKER: &str = "\n[... output truncated ...]\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Interpreter command and leading arguments; the script path is
    /// appended. A container wrapper such as `docker run ... python` fits.
    pub interpreter: Vec<String>,
    pub timeout: Duration,
    /// Time between SIGTERM and SIGKILL once the deadline passes.
    pub grace: Duration,
    pub workdir: PathBuf,
    pub env_allowlist: Vec<String>,
    pub dataset_path: Option<PathBuf>,
    /// Cap on captured bytes per stream.
    pub output_cap: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: vec!["python3".into()],
            timeout: Duration::from_secs(3600),
            grace: Duration::from_secs(5),
            workdir: PathBuf::from("sandbox"),
            env_allowlist: ["PATH", "HOME", "LANG", "TMPDIR"].map(String::from).to_vec(),
            dataset_path: None,
            output_cap: 1 << 20,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.interpreter.first().is_none_or(|c| c.trim().is_empty()) {
            return Err(SandboxError::InvalidConfig("interpreter: must name a command".into()));
        }
        if self.timeout.is_zero() {
            return Err(SandboxError::InvalidConfig("timeout: must be positive".into()));
        }
        if self.output_cap == 0 {
            return Err(SandboxError::InvalidConfig("output_cap: must be positive".into()));
        }
        Ok(())
    }

    /// Names of variables the sandbox itself sets, beyond the allowlist.
    pub fn injected_env(&self) -> Vec<&'static str> {
        let mut names = vec!["PWD"];
        if self.dataset_path.is_some() {
            names.push(DATASET_ENV);
        }
        names
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedMetrics {
    pub performance: BTreeMap<String, f64>,
    pub complexity: BTreeMap<String, f64>,
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Process exit code, or the negated signal number when killed.
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_secs: f64,
    pub performance: BTreeMap<String, f64>,
    pub complexity: BTreeMap<String, f64>,
    pub endpoint: Option<String>,
    pub timed_out: bool,
}

impl RunResult {
    /// Exit 0, no timeout, and at least one performance metric parsed.
    pub fn is_runnable(&self) -> bool {
        self.exit_code == 0 && !self.timed_out && !self.performance.is_empty()
    }

    /// Plain-text digest for verification prompts. Excludes the duration so
    /// that replayed runs render identically.
    pub fn summary(&self, budget: usize) -> String {
        let mut out = format!("exit code: {}", self.exit_code);
        if self.timed_out {
            out.push_str(" (timed out)");
        }
        let fmt_map = |m: &BTreeMap<String, f64>| {
            if m.is_empty() {
                "none".to_string()
            } else {
                m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
            }
        };
        out.push_str(&format!("\nperformance: {}", fmt_map(&self.performance)));
        out.push_str(&format!("\ncomplexity: {}", fmt_map(&self.complexity)));
        out.push_str(&format!("\nendpoint: {}", self.endpoint.as_deref().unwrap_or("none")));
        let tail = |label: &str, text: &str| {
            let t = text.trim_end();
            if t.is_empty() {
                String::new()
            } else {
                let start = t.len().saturating_sub(budget / 2);
                let start = (start..t.len()).find(|i| t.is_char_boundary(*i)).unwrap_or(t.len());
                format!("\n{label} (tail):\n{}", &t[start..])
            }
        };
        out.push_str(&tail("stdout", &self.stdout));
        out.push_str(&tail("stderr", &self.stderr));
        out
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("generated code is empty")]
    EmptyCode,
    #[error("invalid sandbox config: {0}")]
    InvalidConfig(String),
    #[error("failed to spawn `{command}`: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("sandbox I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SandboxError + '_ {
    move |source| SandboxError::Io { path: path.to_path_buf(), source }
}

/// Writes `code` into the working directory and runs it.
pub fn run_pipeline(code: &str, cfg: &SandboxConfig) -> Result<RunResult, SandboxError> {
    if code.trim().is_empty() {
        return Err(SandboxError::EmptyCode);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.workdir).map_err(io_err(&cfg.workdir))?;
    let workdir = cfg.workdir.canonicalize().map_err(io_err(&cfg.workdir))?;
    let script = workdir.join(SCRIPT_FILE);
    std::fs::write(&script, code).map_err(io_err(&script))?;

    let mut command = Command::new(&cfg.interpreter[0]);
    command
        .args(&cfg.interpreter[1..])
        .arg(&script)
        .current_dir(&workdir)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for name in &cfg.env_allowlist {
        if let Some(value) = std::env::var_os(name) {
            command.env(name, value);
        }
    }
    command.env("PWD", OsString::from(&workdir));
    if let Some(dataset) = &cfg.dataset_path {
        command.env(DATASET_ENV, dataset);
    }

    let started = Instant::now();
    let mut child = command
        .spawn()
        .map_err(|source| SandboxError::Spawn { command: cfg.interpreter.join(" "), source })?;
    let pgid = child.id() as libc::pid_t;
    let cap = cfg.output_cap;
    let stdout_reader = spawn_capture(child.stdout.take().expect("stdout is piped"), cap);
    let stderr_reader = spawn_capture(child.stderr.take().expect("stderr is piped"), cap);

    let mut timed_out = false;
    let status = match child.wait_timeout(cfg.timeout).map_err(io_err(&script))? {
        Some(status) => status,
        None => {
            timed_out = true;
            signal_group(pgid, libc::SIGTERM);
            match child.wait_timeout(cfg.grace).map_err(io_err(&script))? {
                Some(status) => status,
                None => {
                    signal_group(pgid, libc::SIGKILL);
                    child.wait().map_err(io_err(&script))?
                }
            }
        }
    };
    // Grandchildren may still hold the pipes open.
    signal_group(pgid, libc::SIGKILL);
    let duration_secs = started.elapsed().as_secs_f64();
    let stdout = stdout_reader.join().unwrap_or_default();
    let stderr = stderr_reader.join().unwrap_or_default();

    let exit_code = status.code().or_else(|| status.signal().map(|s| -s)).unwrap_or(-1);
    let parsed = parse_run_metrics(&stdout);
    let result = RunResult {
        exit_code,
        stdout,
        stderr,
        duration_secs,
        performance: parsed.performance,
        complexity: parsed.complexity,
        endpoint: parsed.endpoint,
        timed_out,
    };

    for (name, body) in [(STDOUT_FILE, &result.stdout), (STDERR_FILE, &result.stderr)] {
        let path = workdir.join(name);
        std::fs::write(&path, body).map_err(io_err(&path))?;
    }
    let path = workdir.join(RESULT_FILE);
    let json = serde_json::to_string_pretty(&result).expect("run result serializes");
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(result)
}

fn signal_group(pgid: libc::pid_t, signal: libc::c_int) {
    // SAFETY: kill(2) with a negative pid only sends a signal; the group was
    // created for this child and a stale id yields ESRCH.
    unsafe {
        libc::kill(-pgid, signal);
    }
}

fn spawn_capture<R: Read + Send + 'static>(mut stream: R, cap: usize) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    truncated |= n > room;
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if truncated {
            text.push_str(TRUNCATION_MARKER);
        }
        text
    })
}

/// Extracts metrics from pipeline stdout.
///
/// The last well-formed `AUTOML_RESULT {json}` line wins. Without one, the
/// skeleton's human-readable dict lines are parsed instead. The endpoint
/// comes from the JSON line when it names one, otherwise from the last
/// `Deployment URL:` or `Gradio URL Endpoint:` line.
pub fn parse_run_metrics(stdout: &str) -> ParsedMetrics {
    let mut structured: Option<ParsedMetrics> = None;
    let mut fallback = ParsedMetrics::default();
    let mut endpoint_line = None;

    for line in stdout.lines() {
        let line = line.trim_start();
        if let Some(json) = line.strip_prefix(RESULT_PREFIX) {
            if let Some(parsed) = parse_result_json(json) {
                structured = Some(parsed);
            }
        } else if let Some(dict) = line.strip_prefix(PERFORMANCE_PREFIX) {
            fallback.performance = parse_python_dict(dict);
        } else if let Some(dict) = line.strip_prefix(COMPLEXITY_PREFIX) {
            fallback.complexity = parse_python_dict(dict);
        } else if let Some(url) = ENDPOINT_PREFIXES.iter().find_map(|p| line.strip_prefix(p)) {
            let url = url.trim();
            if !url.is_empty() {
                endpoint_line = Some(url.to_string());
            }
        }
    }

    let mut metrics = structured.unwrap_or(fallback);
    if metrics.endpoint.is_none() {
        metrics.endpoint = endpoint_line;
    }
    metrics
}

fn parse_result_json(text: &str) -> Option<ParsedMetrics> {
    let Value::Object(root) = serde_json::from_str::<Value>(text.trim()).ok()? else { return None };
    let numbers = |key: &str| -> BTreeMap<String, f64> {
        root.get(key)
            .and_then(Value::as_object)
            .map(|m| m.iter().filter_map(|(k, v)| v.as_f64().map(|f| (k.clone(), f))).collect())
            .unwrap_or_default()
    };
    let endpoint = root
        .get("endpoint")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from);
    Some(ParsedMetrics { performance: numbers("performance"), complexity: numbers("complexity"), endpoint })
}

/// Reads `'key': number` pairs from a printed Python dict. Numbers may be
/// wrapped in a call such as `np.float64(0.9)`; other values are skipped.
pub fn parse_python_dict(text: &str) -> BTreeMap<String, f64> {
    static PAIR: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = PAIR.get_or_init(|| {
        Regex::new(
            r#"(?:'([^']*)'|"([^"]*)")\s*:\s*(?:[A-Za-z_][\w.]*\(\s*)?([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan)\b"#,
        )
        .expect("dict pair regex")
    });
    re.captures_iter(text)
        .filter_map(|c| {
            let key = c.get(1).or_else(|| c.get(2))?.as_str().to_string();
            let value: f64 = c[3].parse().ok()?;
            value.is_finite().then_some((key, value))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, timeout: Duration) -> SandboxConfig {
        SandboxConfig {
            interpreter: vec!["sh".into()],
            timeout,
            grace: Duration::from_secs(1),
            workdir: dir.to_path_buf(),
            ..SandboxConfig::default()
        }
    }

    #[test]
    fn result_line_is_parsed() {
        let m = parse_run_metrics(
            "noise\nAUTOML_RESULT {\"performance\":{\"ACC\":0.9},\"complexity\":{\"Model Size (MB)\":44.0}}\n",
        );
        assert_eq!(m.performance, BTreeMap::from([("ACC".to_string(), 0.9)]));
        assert_eq!(m.complexity, BTreeMap::from([("Model Size (MB)".to_string(), 44.0)]));
        assert_eq!(m.endpoint, None);
    }

    #[test]
    fn skeleton_print_lines_are_parsed() {
        let m = parse_run_metrics(
            "Model Performance on Test Set: {'ACC': 0.91, 'F1': 0.9}\nModel Complexity: {'Model Size (MB)': np.float64(12.5)}\nDeployment URL: http://127.0.0.1:7860\n",
        );
        assert_eq!(m.performance, BTreeMap::from([("ACC".into(), 0.91), ("F1".into(), 0.9)]));
        assert_eq!(m.complexity["Model Size (MB)"], 12.5);
        assert_eq!(m.endpoint.as_deref(), Some("http://127.0.0.1:7860"));
    }

    #[test]
    fn neither_protocol_gives_empty_maps() {
        assert_eq!(parse_run_metrics("hello\nworld"), ParsedMetrics::default());
        assert_eq!(parse_run_metrics(""), ParsedMetrics::default());
    }

    #[test]
    fn malformed_result_line_falls_back() {
        let m = parse_run_metrics("AUTOML_RESULT {oops\nModel Performance on Test Set: {'RMSLE': 0.2}");
        assert_eq!(m.performance["RMSLE"], 0.2);
    }

    #[test]
    fn gradio_endpoint_and_json_endpoint_priority() {
        let m = parse_run_metrics("Gradio URL Endpoint: http://a\nAUTOML_RESULT {\"performance\":{},\"endpoint\":\"http://b\"}");
        assert_eq!(m.endpoint.as_deref(), Some("http://b"));
        let m = parse_run_metrics("Gradio URL Endpoint: http://a\nAUTOML_RESULT {\"performance\":{},\"endpoint\":null}");
        assert_eq!(m.endpoint.as_deref(), Some("http://a"));
    }

    #[test]
    fn python_dict_values() {
        let d = parse_python_dict("{'a': 1, \"b\": -2.5e-3, 'c': 'text', 'd': float(3.0), 'e': nan}");
        assert_eq!(d, BTreeMap::from([("a".into(), 1.0), ("b".into(), -2.5e-3), ("d".into(), 3.0)]));
    }

    #[test]
    fn stub_script_result_is_captured() {
        let dir = tempfile::tempdir().unwrap();
        let code = "echo 'AUTOML_RESULT {\"performance\":{\"ACC\":0.9}}'\n";
        let r = run_pipeline(code, &cfg(dir.path(), Duration::from_secs(10))).unwrap();
        assert_eq!(r.exit_code, 0);
        assert!(!r.timed_out);
        assert_eq!(r.performance["ACC"], 0.9);
        for f in [SCRIPT_FILE, STDOUT_FILE, STDERR_FILE, RESULT_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn nonzero_exit_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline("echo boom >&2\nexit 3\n", &cfg(dir.path(), Duration::from_secs(10))).unwrap();
        assert_eq!(r.exit_code, 3);
        assert_eq!(r.stderr, "boom\n");
        assert!(r.performance.is_empty());
        assert!(!r.is_runnable());
    }

    #[test]
    fn deadline_kills_process_group() {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let r = run_pipeline("sleep 30 &\nsleep 30\n", &cfg(dir.path(), Duration::from_secs(2))).unwrap();
        let elapsed = started.elapsed().as_secs_f64();
        assert!(r.timed_out);
        assert!(r.exit_code != 0);
        assert!((1.5..2.5 + 1.0).contains(&elapsed), "{elapsed}");
    }

    #[test]
    fn output_is_capped() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), Duration::from_secs(10));
        c.output_cap = 100;
        let r = run_pipeline("i=0; while [ $i -lt 100 ]; do echo 0123456789; i=$((i+1)); done\n", &c).unwrap();
        assert!(r.stdout.starts_with("0123456789\n"));
        assert!(r.stdout.ends_with(TRUNCATION_MARKER));
        assert!(r.stdout.len() <= 100 + TRUNCATION_MARKER.len());
    }

    #[test]
    fn missing_interpreter_is_spawn_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), Duration::from_secs(1));
        c.interpreter = vec!["/nonexistent/interpreter".into()];
        assert!(matches!(run_pipeline("x", &c), Err(SandboxError::Spawn { .. })));
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_pipeline("  ", &cfg(dir.path(), Duration::from_secs(1))), Err(SandboxError::EmptyCode)));
        let c = cfg(dir.path(), Duration::ZERO);
        assert!(matches!(run_pipeline("x", &c), Err(SandboxError::InvalidConfig(m)) if m.starts_with("timeout")));
    }

    #[test]
    fn summary_omits_duration() {
        let r = RunResult {
            exit_code: 0,
            stdout: "ok\n".into(),
            stderr: String::new(),
            duration_secs: 12.3,
            performance: BTreeMap::from([("ACC".into(), 0.9)]),
            complexity: BTreeMap::new(),
            endpoint: None,
            timed_out: false,
        };
        let s = r.summary(1000);
        assert!(s.contains("performance: ACC=0.9"));
        assert!(!s.contains("12.3"));
    }
}
