#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use automl_core::gateway::MockBackend;
use automl_core::metrics::GradingMode;
use automl_core::orchestrator::{BackendChoice, RunConfig};
use automl_core::sandbox::SandboxConfig;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(rel: &str) -> PathBuf {
    repo_root().join("fixtures").join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn aware_instruction() -> String {
    read_fixture("requirements/banana_constraint_aware.instruction.txt")
}

pub fn aware_json() -> String {
    read_fixture("requirements/banana_constraint_aware.json")
}

/// Config for hermetic runs: shell-interpreted stubs, no retrieval, mock
/// backend, runs under `run_root`.
pub fn test_config(run_root: &Path, p_count: usize, max_rounds: u32) -> RunConfig {
    RunConfig {
        p_count,
        max_rounds,
        mode: GradingMode::ConstraintAware,
        sandbox: SandboxConfig {
            interpreter: vec!["sh".into()],
            timeout: Duration::from_secs(20),
            grace: Duration::from_secs(1),
            ..SandboxConfig::default()
        },
        backend: BackendChoice::Mock { script: PathBuf::from("unused") },
        skeleton_dir: repo_root().join("skeletons"),
        run_root: run_root.to_path_buf(),
        ..RunConfig::default()
    }
}

pub const STUB_CODE: &str = "```python\necho \"Model Performance on Test Set: {'F1': 0.97, 'ACC': 0.99}\"\necho 'AUTOML_RESULT {\"performance\": {\"F1\": 0.97, \"ACC\": 0.99}, \"complexity\": {}, \"endpoint\": \"http://127.0.0.1:7860\"}'\n```";

const SEARCH: &str = "## Candidate Models\n1. **XGBoost**\n- **Expected Accuracy**: 0.99\n- **Learning Rate**: 0.1\n2. **LightGBM**\n- **Expected Accuracy**: 0.98\n- **Learning Rate**: 0.05\n3. **RandomForest**\n- **Expected Accuracy**: 0.97\n- **Max Depth**: 8";

/// Scripted responses, one rule per call, built round by round.
pub struct Script {
    pub rules: Vec<(String, String)>,
}

impl Script {
    pub fn init(doc: &str) -> Self {
        Script {
            rules: vec![
                ("manager/relevancy".into(), "Yes".into()),
                ("prompt/parse".into(), doc.into()),
                ("manager/adequacy".into(), "yes; everything needed is present".into()),
            ],
        }
    }

    fn push(&mut self, tag: String, response: impl Into<String>) {
        self.rules.push((tag, response.into()));
    }

    /// One round with `exec_pass[i]` deciding plan i's execution verdict.
    /// When any plan passes, selection (if needed), codegen and
    /// implementation verification follow with `impl_pass`.
    pub fn round(mut self, round: u32, exec_pass: &[bool], impl_pass: bool) -> Self {
        let p = exec_pass.len();
        for i in 0..p {
            self.push(format!("manager/plan/r{round}/p{i}"), format!("plan {i} of round {round}"));
        }
        for i in 0..p {
            self.push(format!("data/decompose/r{round}/p{i}"), format!("data steps {i}"));
            self.push(format!("data/analysis/r{round}/p{i}"), format!("data outcome {i}"));
            self.push(format!("model/decompose/r{round}/p{i}"), format!("model steps {i}"));
            self.push(format!("model/search/r{round}/p{i}"), SEARCH);
        }
        for (i, pass) in exec_pass.iter().enumerate() {
            let verdict = if *pass { "Pass".to_string() } else { format!("Fail. plan {i} ignores the accuracy target") };
            self.push(format!("manager/exec_verify/r{round}/p{i}"), verdict);
        }
        let passers: Vec<usize> = (0..p).filter(|i| exec_pass[*i]).collect();
        if !passers.is_empty() {
            if passers.len() > 1 {
                self.push(format!("manager/select/r{round}"), format!("plan {}", passers[passers.len() - 1]));
            }
            self.push(format!("operation/codegen/r{round}"), STUB_CODE);
            let verdict = if impl_pass { "Pass" } else { "Fail. the endpoint is never exercised" };
            self.push(format!("manager/impl_verify/r{round}"), verdict);
        }
        self
    }

    pub fn backend(&self) -> MockBackend {
        self.rules.iter().fold(MockBackend::default(), |m, (tag, text)| m.respond(tag, text.clone()))
    }
}
