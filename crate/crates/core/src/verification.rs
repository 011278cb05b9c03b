//! Request, execution and implementation verification, verdict parsing and
//! the failure digest that feeds plan revision.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::ExecutionOutcome;
use crate::gateway::{ChatRequest, Gateway, GatewayError, DETERMINISTIC_TEMPERATURE};
use crate::prompts::{self, ids, AgentRole, Slots};
use crate::requirements::{RawInstruction, UserRequirements};
use crate::util::fan_out;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RequestRelevancy,
    RequestAdequacy,
    Execution,
    Implementation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::RequestRelevancy => "request_relevancy",
            Stage::RequestAdequacy => "request_adequacy",
            Stage::Execution => "execution",
            Stage::Implementation => "implementation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Invariant: `rationale` is non-empty whenever `passed` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<usize>,
    pub passed: bool,
    pub rationale: String,
    pub raw_response: String,
}

/// Message returned to the user when a request cannot proceed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub message: String,
    pub missing_items: Vec<String>,
}

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("verdict unparseable for {stage}: {response:?}")]
    VerdictUnparseable { stage: Stage, response: String },
    #[error("no failures recorded")]
    NoFailures,
    #[error("nothing to verify: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no standalone {expected} token found")]
pub struct Unparseable {
    pub expected: &'static str,
}

fn first_token_among(text: &str, positive: &str, negative: &str) -> Option<bool> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .find_map(|t| {
            if t == positive {
                Some(true)
            } else if t == negative {
                Some(false)
            } else {
                None
            }
        })
}

pub fn parse_yes_no(text: &str) -> Result<bool, Unparseable> {
    first_token_among(text, "yes", "no").ok_or(Unparseable { expected: "yes/no" })
}

/// `true` for pass, `false` for fail, decided by the first standalone token
/// (case-insensitive, split on non-alphanumerics). `"passes"` is not a token
/// match for `"pass"`.
pub fn parse_pass_fail(text: &str) -> Result<bool, Unparseable> {
    first_token_among(text, "pass", "fail").ok_or(Unparseable { expected: "pass/fail" })
}

fn manager_request(tag: String, user_prompt: String) -> ChatRequest {
    ChatRequest::new(tag)
        .system(AgentRole::Manager.system_prompt())
        .user(user_prompt)
        .temperature(DETERMINISTIC_TEMPERATURE)
}

fn explain(response: &str, fallback: &str) -> String {
    let trimmed = response.trim();
    let words = trimmed.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).count();
    if words > 1 {
        trimmed.to_string()
    } else {
        fallback.to_string()
    }
}

pub const RELEVANCY_TAG: &str = "manager/relevancy";
pub const ADEQUACY_TAG: &str = "manager/adequacy";

pub enum RelevancyCheck {
    Relevant(Verdict),
    Irrelevant(Verdict, Feedback),
}

/// Asks whether the instruction concerns machine learning or AI.
pub fn verify_relevancy(instruction: &RawInstruction, gateway: &Gateway) -> Result<RelevancyCheck, VerificationError> {
    if instruction.is_blank() {
        return Err(VerificationError::Precondition("instruction is empty".into()));
    }
    let prompt = prompts::render(ids::REQUEST_RELEVANCY, &Slots::from([("user instruction", instruction.text.trim())]))
        .expect("relevancy template has one slot");
    let response = gateway.complete(&manager_request(RELEVANCY_TAG.into(), prompt))?;
    let passed = parse_yes_no(&response).map_err(|_| VerificationError::VerdictUnparseable {
        stage: Stage::RequestRelevancy,
        response: response.clone(),
    })?;
    let rationale = if passed {
        explain(&response, "")
    } else {
        explain(&response, "the request is not related to machine learning or artificial intelligence")
    };
    let verdict = Verdict { stage: Stage::RequestRelevancy, plan_id: None, passed, rationale, raw_response: response };
    if passed {
        Ok(RelevancyCheck::Relevant(verdict))
    } else {
        let feedback = Feedback {
            message: format!(
                "This request does not look like a machine learning or AI task ({}). Please describe the problem, the data, and the expected result.",
                verdict.rationale
            ),
            missing_items: Vec::new(),
        };
        Ok(RelevancyCheck::Irrelevant(verdict, feedback))
    }
}

/// Splits an adequacy answer of the form `yes|no; reasons`.
///
/// Missing items are the `;`-separated reason segments that do not start
/// with an example or alternative marker.
pub fn parse_adequacy(response: &str) -> Result<(bool, String, Vec<String>), Unparseable> {
    let (head, reasons) = match response.split_once(';') {
        Some((h, r)) => (h, r.trim()),
        None => (response, ""),
    };
    let ok = parse_yes_no(head).or_else(|_| parse_yes_no(response))?;
    let missing = reasons
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .filter(|s| {
            let lower = s.to_lowercase();
            !["example", "alternative", "e.g"].iter().any(|m| lower.starts_with(m))
        })
        .map(String::from)
        .collect();
    Ok((ok, reasons.to_string(), missing))
}

pub enum AdequacyCheck {
    Adequate(Verdict),
    Inadequate(Verdict, Feedback),
}

/// Asks whether the parsed requirements carry the essentials.
pub fn verify_adequacy(r: &UserRequirements, gateway: &Gateway) -> Result<AdequacyCheck, VerificationError> {
    let json = r.to_pretty_json();
    let prompt = prompts::render(ids::REQUEST_ADEQUACY, &Slots::from([("parsed user requirements", json.as_str())]))
        .expect("adequacy template has one slot");
    let response = gateway.complete(&manager_request(ADEQUACY_TAG.into(), prompt))?;
    let (passed, reasons, missing_items) = parse_adequacy(&response).map_err(|_| {
        VerificationError::VerdictUnparseable { stage: Stage::RequestAdequacy, response: response.clone() }
    })?;
    let rationale = if reasons.is_empty() && !passed {
        "the request lacks essential information".to_string()
    } else {
        reasons.clone()
    };
    let verdict = Verdict { stage: Stage::RequestAdequacy, plan_id: None, passed, rationale, raw_response: response };
    if passed {
        Ok(AdequacyCheck::Adequate(verdict))
    } else {
        let message = if reasons.is_empty() { verdict.rationale.clone() } else { reasons };
        Ok(AdequacyCheck::Inadequate(verdict, Feedback { message, missing_items }))
    }
}

pub enum RequestVerification {
    Passed { relevancy: Verdict, adequacy: Option<Verdict> },
    Feedback { verdicts: Vec<Verdict>, feedback: Feedback },
}

/// Relevancy first, then adequacy when a parsed document is supplied.
pub fn verify_request(
    instruction: &RawInstruction,
    r: Option<&UserRequirements>,
    gateway: &Gateway,
) -> Result<RequestVerification, VerificationError> {
    let relevancy = match verify_relevancy(instruction, gateway)? {
        RelevancyCheck::Relevant(v) => v,
        RelevancyCheck::Irrelevant(v, feedback) => {
            return Ok(RequestVerification::Feedback { verdicts: vec![v], feedback })
        }
    };
    let Some(r) = r else { return Ok(RequestVerification::Passed { relevancy, adequacy: None }) };
    match verify_adequacy(r, gateway)? {
        AdequacyCheck::Adequate(v) => Ok(RequestVerification::Passed { relevancy, adequacy: Some(v) }),
        AdequacyCheck::Inadequate(v, feedback) => {
            Ok(RequestVerification::Feedback { verdicts: vec![relevancy, v], feedback })
        }
    }
}

pub const UNPARSEABLE_RATIONALE: &str = "unparseable verdict";

pub fn exec_verify_tag(round: u32, plan_id: usize) -> String {
    format!("manager/exec_verify/r{round}/p{plan_id}")
}

pub fn impl_verify_tag(round: u32) -> String {
    format!("manager/impl_verify/r{round}")
}

/// Judges each outcome independently. Verdicts follow outcome order.
pub fn verify_execution(
    outcomes: &[ExecutionOutcome],
    r: &UserRequirements,
    round: u32,
    workers: usize,
    gateway: &Gateway,
) -> Result<Vec<Verdict>, VerificationError> {
    if outcomes.is_empty() {
        return Err(VerificationError::Precondition("no healthy execution outcome".into()));
    }
    let json = r.to_pretty_json();
    let results = fan_out(outcomes, workers, |o| {
        let prompt = prompts::render(
            ids::EXEC_VERIFICATION,
            &Slots::from([
                ("user_requirements", json.as_str()),
                ("data_agent_outcomes", o.data_outcome.as_str()),
                ("model_agent_outcomes", o.model_outcome.as_str()),
            ]),
        )
        .expect("execution verification slots are complete");
        let response = gateway.complete(&manager_request(exec_verify_tag(round, o.plan_id), prompt))?;
        Ok(judge(Stage::Execution, Some(o.plan_id), response, "the proposed solution does not satisfy the user's requirements"))
    });
    results.into_iter().collect()
}

fn judge(stage: Stage, plan_id: Option<usize>, response: String, fail_default: &str) -> Verdict {
    match parse_pass_fail(&response) {
        Ok(true) => Verdict { stage, plan_id, passed: true, rationale: explain(&response, ""), raw_response: response },
        Ok(false) => {
            Verdict { stage, plan_id, passed: false, rationale: explain(&response, fail_default), raw_response: response }
        }
        Err(_) => {
            tracing::warn!(%stage, ?plan_id, "unparseable verdict recorded as failure");
            Verdict { stage, plan_id, passed: false, rationale: UNPARSEABLE_RATIONALE.into(), raw_response: response }
        }
    }
}

/// Judges the generated code against its execution result.
pub fn verify_implementation(
    code: &str,
    run_summary: &str,
    r: &UserRequirements,
    plan_id: usize,
    round: u32,
    gateway: &Gateway,
) -> Result<Verdict, VerificationError> {
    if code.trim().is_empty() {
        return Err(VerificationError::Precondition("code is empty".into()));
    }
    let json = r.to_pretty_json();
    let prompt = prompts::render(
        ids::IMPL_VERIFICATION,
        &Slots::from([
            ("implementation_result['code']", code),
            ("implementation_result['action_result']", run_summary),
            ("user_requirements", json.as_str()),
        ]),
    )
    .expect("implementation verification slots are complete");
    let response = gateway.complete(&manager_request(impl_verify_tag(round), prompt))?;
    Ok(judge(Stage::Implementation, Some(plan_id), response, "the implementation does not satisfy the user's requirements"))
}

/// One documented failure within a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub plan_id: Option<usize>,
    pub stage: String,
    pub detail: String,
}

impl FailureRecord {
    pub fn from_verdict(v: &Verdict) -> Self {
        Self { plan_id: v.plan_id, stage: v.stage.to_string(), detail: v.rationale.clone() }
    }
}

/// Digest of a round's failures ordered by plan id; records without a plan
/// come last. Ties keep their input order.
pub fn collect_fail_rationale(failures: &[FailureRecord]) -> Result<String, VerificationError> {
    if failures.is_empty() {
        return Err(VerificationError::NoFailures);
    }
    let mut sorted: Vec<&FailureRecord> = failures.iter().collect();
    sorted.sort_by_key(|f| f.plan_id.unwrap_or(usize::MAX));
    let lines: Vec<String> = sorted
        .iter()
        .map(|f| {
            let who = f.plan_id.map(|id| format!("plan {id}")).unwrap_or_else(|| "round".into());
            let detail = f.detail.split_whitespace().collect::<Vec<_>>().join(" ");
            format!("- {who} failed at {}: {detail}", f.stage)
        })
        .collect();
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::ExecutionOutcome;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    fn fixture() -> UserRequirements {
        serde_json::from_str(include_str!("../../../fixtures/requirements/banana_constraint_aware.json")).unwrap()
    }

    fn outcome(id: usize) -> ExecutionOutcome {
        ExecutionOutcome {
            plan_id: id,
            data_outcome: format!("DATA-{id}"),
            model_outcome: format!("MODEL-{id}"),
            candidates: Vec::new(),
        }
    }

    #[test]
    fn verdict_tokens() {
        assert_eq!(parse_pass_fail("Pass"), Ok(true));
        assert_eq!(parse_pass_fail("  fail."), Ok(false));
        assert_eq!(parse_pass_fail("The solution passes all checks: Pass"), Ok(true));
        assert!(parse_pass_fail("maybe").is_err());
        assert!(parse_pass_fail("").is_err());
        assert_eq!(parse_yes_no("YES, it is"), Ok(true));
        assert_eq!(parse_yes_no("Nope. no"), Ok(false));
        assert_eq!(parse_yes_no("**No**"), Ok(false));
    }

    #[test]
    fn adequacy_format() {
        let (ok, reasons, missing) =
            parse_adequacy("no; missing dataset description; example: attach a CSV").unwrap();
        assert!(!ok);
        assert_eq!(reasons, "missing dataset description; example: attach a CSV");
        assert_eq!(missing, vec!["missing dataset description"]);
        let (ok, _, missing) = parse_adequacy("yes; all essentials present").unwrap();
        assert!(ok);
        assert_eq!(missing, vec!["all essentials present"]);
        assert!(parse_adequacy("perhaps; unclear").is_err());
    }

    #[test]
    fn request_both_pass() {
        let gw = Gateway::new(Arc::new(
            MockBackend::default().respond(RELEVANCY_TAG, "Yes").respond(ADEQUACY_TAG, "yes; all essentials present"),
        ));
        let r = fixture();
        let out = verify_request(&RawInstruction::new("classify bananas"), Some(&r), &gw).unwrap();
        assert!(matches!(out, RequestVerification::Passed { adequacy: Some(ref a), .. } if a.passed));
        assert_eq!(gw.transcript().len(), 2);
    }

    #[test]
    fn irrelevant_short_circuits() {
        let gw = Gateway::new(Arc::new(MockBackend::default().respond(RELEVANCY_TAG, "No")));
        let r = fixture();
        let out = verify_request(&RawInstruction::new("bake a cake"), Some(&r), &gw).unwrap();
        match out {
            RequestVerification::Feedback { verdicts, .. } => {
                assert_eq!(verdicts.len(), 1);
                assert!(!verdicts[0].rationale.is_empty());
            }
            _ => panic!("expected feedback"),
        }
        assert_eq!(gw.transcript().len(), 1);
        assert!(gw.transcript().entries()[0].prompt().contains("`bake a cake`"));
    }

    #[test]
    fn inadequate_request_feedback() {
        let gw = Gateway::new(Arc::new(
            MockBackend::default()
                .respond(RELEVANCY_TAG, "Yes")
                .respond(ADEQUACY_TAG, "no; missing dataset description; example: attach a CSV"),
        ));
        let out = verify_request(&RawInstruction::new("x"), Some(&fixture()), &gw).unwrap();
        let RequestVerification::Feedback { feedback, .. } = out else { panic!() };
        assert_eq!(feedback.missing_items, vec!["missing dataset description"]);
        assert!(feedback.message.contains("attach a CSV"));
    }

    #[test]
    fn unparseable_relevancy_is_an_error() {
        let gw = Gateway::new(Arc::new(MockBackend::default().respond(RELEVANCY_TAG, "hmm")));
        let err = verify_relevancy(&RawInstruction::new("x"), &gw);
        assert!(matches!(err, Err(VerificationError::VerdictUnparseable { stage: Stage::RequestRelevancy, .. })));
    }

    #[test]
    fn execution_verdicts_in_outcome_order() {
        let gw = Gateway::new(Arc::new(
            MockBackend::default()
                .respond("manager/exec_verify/r0/p0", "Pass")
                .respond("manager/exec_verify/r0/p1", "Fail")
                .respond("manager/exec_verify/r0/p2", "Pass"),
        ));
        let outcomes = [outcome(0), outcome(1), outcome(2)];
        let v = verify_execution(&outcomes, &fixture(), 0, 3, &gw).unwrap();
        assert_eq!(v.iter().map(|v| v.passed).collect::<Vec<_>>(), vec![true, false, true]);
        assert_eq!(v[1].plan_id, Some(1));
        assert!(!v[1].rationale.is_empty());
        let entries = gw.transcript().entries();
        for e in &entries {
            let p = e.prompt();
            assert!(p.trim_end().ends_with("Answer only 'Pass' or 'Fail'"));
            assert!(p.contains("Data Manipulation and Analysis:"));
        }
    }

    #[test]
    fn unparseable_execution_verdict_fails() {
        let gw = Gateway::new(Arc::new(MockBackend::default().respond("*", "I am not sure")));
        let v = verify_execution(&[outcome(0)], &fixture(), 0, 1, &gw).unwrap();
        assert!(!v[0].passed);
        assert_eq!(v[0].rationale, UNPARSEABLE_RATIONALE);
    }

    #[test]
    fn implementation_verdict() {
        let gw = Gateway::new(Arc::new(MockBackend::default().respond("manager/impl_verify/r0", "Pass")));
        let v = verify_implementation("print(1)", "exit code: 0", &fixture(), 1, 0, &gw).unwrap();
        assert!(v.passed);
        assert_eq!(v.stage, Stage::Implementation);
        assert!(gw.transcript().entries()[0].prompt().contains("- Code Execution Result"));
    }

    #[test]
    fn rationale_digest() {
        let failures = [
            FailureRecord { plan_id: Some(2), stage: "execution".into(), detail: "too slow".into() },
            FailureRecord { plan_id: Some(1), stage: "execution".into(), detail: "latency too high".into() },
            FailureRecord { plan_id: Some(0), stage: "model_search_hpo".into(), detail: "transport error".into() },
        ];
        let digest = collect_fail_rationale(&failures).unwrap();
        assert_eq!(
            digest,
            "- plan 0 failed at model_search_hpo: transport error\n- plan 1 failed at execution: latency too high\n- plan 2 failed at execution: too slow"
        );
        assert!(matches!(collect_fail_rationale(&[]), Err(VerificationError::NoFailures)));
    }
}
