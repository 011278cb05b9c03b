//! Plan generation and revision.
//!
//! Plan ids are positional and assigned before dispatch, so the content of a
//! [`PlanSet`] does not depend on the order in which slots complete.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, CREATIVE_TEMPERATURE};
use crate::knowledge::KnowledgeBundle;
use crate::prompts::{self, ids, AgentRole, Slots};
use crate::requirements::UserRequirements;
use crate::util::fan_out;

/// Number of plans per round unless configured otherwise.
pub const DEFAULT_PLAN_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub id: usize,
    pub text: String,
    pub revision_round: u32,
    pub knowledge_digest: String,
}

/// Invariant: `fail_rationale.is_some() == (round > 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSet {
    pub round: u32,
    pub plans: Vec<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_rationale: Option<String>,
}

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("plan count must be at least 1")]
    InvalidCount,
    #[error("revision requires a non-empty failure rationale")]
    EmptyRationale,
    #[error("plan {plan_id} failed: {source}")]
    Backend { plan_id: usize, source: GatewayError },
    #[error("plan {plan_id} came back empty")]
    EmptyPlan { plan_id: usize },
}

impl PlanningError {
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            PlanningError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub fn plan_tag(round: u32, plan_id: usize) -> String {
    format!("manager/plan/r{round}/p{plan_id}")
}

fn collect(
    round: u32,
    prompt: &str,
    p_count: usize,
    workers: usize,
    knowledge_digest: &str,
    gateway: &Gateway,
) -> Result<Vec<Plan>, PlanningError> {
    let ids: Vec<usize> = (0..p_count).collect();
    let results = fan_out(&ids, workers, |&id| {
        let request = ChatRequest::new(plan_tag(round, id))
            .system(AgentRole::Manager.system_prompt())
            .user(prompt)
            .temperature(CREATIVE_TEMPERATURE);
        let text = gateway.complete(&request).map_err(|source| PlanningError::Backend { plan_id: id, source })?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(PlanningError::EmptyPlan { plan_id: id });
        }
        Ok(Plan { id, text, revision_round: round, knowledge_digest: knowledge_digest.to_string() })
    });
    results.into_iter().collect()
}

/// Round-0 plans, one independent call per slot.
pub fn devise_plans(
    r: &UserRequirements,
    knowledge: &KnowledgeBundle,
    p_count: usize,
    workers: usize,
    gateway: &Gateway,
) -> Result<PlanSet, PlanningError> {
    if p_count == 0 {
        return Err(PlanningError::InvalidCount);
    }
    let json = r.to_pretty_json();
    let prompt = prompts::render(
        ids::PLANNING,
        &Slots::from([("user_requirements", json.as_str()), ("plan_knowledge", knowledge.aggregate.as_str())]),
    )
    .expect("planning slots are complete");
    let plans = collect(0, &prompt, p_count, workers, &knowledge.aggregate, gateway)?;
    Ok(PlanSet { round: 0, plans, fail_rationale: None })
}

/// Plans for `previous_round + 1`, each prompt carrying the failure digest.
/// The knowledge bundle is not re-retrieved.
pub fn revise_plans(
    r: &UserRequirements,
    previous_round: u32,
    fail_rationale: &str,
    knowledge: &KnowledgeBundle,
    p_count: usize,
    workers: usize,
    gateway: &Gateway,
) -> Result<PlanSet, PlanningError> {
    if p_count == 0 {
        return Err(PlanningError::InvalidCount);
    }
    if fail_rationale.trim().is_empty() {
        return Err(PlanningError::EmptyRationale);
    }
    let json = r.to_pretty_json();
    let n_plans = p_count.to_string();
    let prompt = prompts::render(
        ids::PLAN_REVISION,
        &Slots::from([
            ("user_requirements", json.as_str()),
            ("fail_rationale", fail_rationale),
            ("n_plans", n_plans.as_str()),
        ]),
    )
    .expect("revision slots are complete");
    let round = previous_round + 1;
    let plans = collect(round, &prompt, p_count, workers, &knowledge.aggregate, gateway)?;
    Ok(PlanSet { round, plans, fail_rationale: Some(fail_rationale.to_string()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    fn banana() -> UserRequirements {
        serde_json::from_str(include_str!("../../../fixtures/requirements/banana_constraint_free.json")).unwrap()
    }

    fn scripted(round: u32, n: usize) -> MockBackend {
        (0..n).fold(MockBackend::default(), |m, i| m.respond(&plan_tag(round, i), format!("PLAN-{i}")))
    }

    #[test]
    fn three_plans_in_round_zero() {
        let gw = Gateway::new(Arc::new(scripted(0, 3)));
        let set = devise_plans(&banana(), &KnowledgeBundle::fallback(), 3, 3, &gw).unwrap();
        assert_eq!(set.round, 0);
        assert_eq!(set.fail_rationale, None);
        let got: Vec<_> = set.plans.iter().map(|p| (p.id, p.text.as_str())).collect();
        assert_eq!(got, vec![(0, "PLAN-0"), (1, "PLAN-1"), (2, "PLAN-2")]);
        for e in gw.transcript().entries() {
            assert!(e.prompt().contains("devise an end-to-end actionable plan"));
            assert!(e.prompt().contains("\"banana_quality\""));
        }
    }

    #[test]
    fn single_plan_and_zero_count() {
        let gw = Gateway::new(Arc::new(scripted(0, 1)));
        assert_eq!(devise_plans(&banana(), &KnowledgeBundle::fallback(), 1, 1, &gw).unwrap().plans.len(), 1);
        assert!(matches!(
            devise_plans(&banana(), &KnowledgeBundle::fallback(), 0, 1, &gw),
            Err(PlanningError::InvalidCount)
        ));
    }

    #[test]
    fn failed_slot_fails_round() {
        let err = GatewayError::Transport { status: Some(500), message: "x".into() };
        let mock = MockBackend::default().respond(&plan_tag(0, 0), "A").fail(&plan_tag(0, 1), &err);
        let gw = Gateway::new(Arc::new(mock));
        let out = devise_plans(&banana(), &KnowledgeBundle::fallback(), 2, 2, &gw);
        assert!(matches!(out, Err(PlanningError::Backend { plan_id: 1, .. })));
    }

    #[test]
    fn revision_embeds_rationale() {
        let gw = Gateway::new(Arc::new(scripted(1, 3)));
        let set = revise_plans(&banana(), 0, "models exceeded latency budget", &KnowledgeBundle::fallback(), 3, 3, &gw)
            .unwrap();
        assert_eq!(set.round, 1);
        assert!(set.plans.iter().all(|p| p.revision_round == 1));
        for e in gw.transcript().entries() {
            let p = e.prompt();
            assert!(p.contains("models exceeded latency budget"));
            assert!(p.contains("Try as much as you can to avoid the same failure again"));
            assert!(p.contains("revise and rethink three different"));
        }
        assert!(matches!(
            revise_plans(&banana(), 0, " ", &KnowledgeBundle::fallback(), 3, 3, &gw),
            Err(PlanningError::EmptyRationale)
        ));
    }
}
