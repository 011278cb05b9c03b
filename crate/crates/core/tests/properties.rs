use std::collections::BTreeMap;
use std::sync::Arc;

use automl_core::codegen::{extract_code_block, select_best_outcome, select_tag, synthesize_instruction};
use automl_core::execution::ExecutionOutcome;
use automl_core::metrics::{compute_cs, compute_nps, MetricKind};
use automl_core::sandbox::{parse_run_metrics, COMPLEXITY_PREFIX, PERFORMANCE_PREFIX, RESULT_PREFIX};
use automl_core::verification::{collect_fail_rationale, parse_pass_fail, FailureRecord, Stage, Verdict};
use automl_core::{Gateway, MockBackend, UserRequirements};
use proptest::prelude::*;

/// Reference: scan characters, cut tokens at anything that is not a letter
/// or digit, return the first token equal to `pass` or `fail`.
fn oracle_pass_fail(text: &str) -> Option<bool> {
    let mut token = String::new();
    let mut chars = text.chars().chain(std::iter::once(' '));
    loop {
        let Some(c) = chars.next() else { return None };
        if c.is_alphabetic() || c.is_numeric() {
            token.extend(c.to_lowercase());
            continue;
        }
        match token.as_str() {
            "pass" => return Some(true),
            "fail" => return Some(false),
            _ => token.clear(),
        }
    }
}

fn verdict_text() -> impl Strategy<Value = String> {
    let word = prop::sample::select(vec![
        "pass", "Pass", "PASS", "fail", "Fail", "FAIL", "passes", "failed", "passfail", "bypass", "yes", "no",
        "verdict", "plan", "2", "ok",
    ]);
    let sep = prop::sample::select(vec![" ", ".", ",", "!", "\n", "-", "_", ":", "**", "'", "(", ")", ""]);
    prop::collection::vec((word, sep), 0..8).prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect())
}

fn code_text() -> impl Strategy<Value = String> {
    prop::collection::vec("[ -~]{0,30}", 1..8)
        .prop_map(|lines| lines.join("\n"))
        .prop_filter("no fence lines", |code| code.lines().all(|l| !l.trim_start().starts_with("```")))
}

fn metric_map() -> impl Strategy<Value = BTreeMap<String, f64>> {
    let key = prop::sample::select(vec!["ACC", "F1", "RMSLE", "RI", "Inference Time (s)"]);
    prop::collection::btree_map(key.prop_map(String::from), (0u32..100_000).prop_map(|n| f64::from(n) / 1000.0), 1..5)
}

fn requirements() -> UserRequirements {
    serde_json::from_str(include_str!("../../../fixtures/requirements/banana_constraint_aware.json")).unwrap()
}

proptest! {
    #[test]
    fn nps_is_bounded_and_strictly_decreasing_for_losses(a in 0.0f64..1e6, b in 0.0f64..1e6) {
        let na = compute_nps(a, MetricKind::LossLike).unwrap();
        let nb = compute_nps(b, MetricKind::LossLike).unwrap();
        prop_assert!(na > 0.0 && na <= 1.0);
        if a < b {
            prop_assert!(na > nb);
        }
    }

    #[test]
    fn nps_passes_higher_better_scores_through(s in 0.0f64..=1.0) {
        prop_assert_eq!(compute_nps(s, MetricKind::HigherBetter).unwrap(), s);
    }

    #[test]
    fn cs_is_the_midpoint_and_stays_in_unit_interval(sr in 0.0f64..=1.0, nps in 0.0f64..=1.0) {
        let cs = compute_cs(sr, nps).unwrap();
        prop_assert!((cs - (sr + nps) / 2.0).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&cs));
        prop_assert!(cs >= sr.min(nps) && cs <= sr.max(nps));
    }

    #[test]
    fn fence_round_trip_preserves_bytes(code in code_text(), before in "[a-zA-Z .,]{0,40}", after in "[a-zA-Z .,]{0,40}") {
        let wrapped = format!("{before}\n```python\n{code}\n```\n{after}");
        prop_assert_eq!(extract_code_block(&wrapped).unwrap(), code);
    }

    #[test]
    fn pass_fail_matches_reference_tokenizer(text in verdict_text()) {
        prop_assert_eq!(parse_pass_fail(&text).ok(), oracle_pass_fail(&text));
    }

    #[test]
    fn result_line_and_printed_dicts_agree(perf in metric_map(), complexity in metric_map()) {
        let dict = |m: &BTreeMap<String, f64>| {
            let items: Vec<String> = m.iter().map(|(k, v)| format!("'{k}': {v:?}")).collect();
            format!("{{{}}}", items.join(", "))
        };
        let printed = format!("{PERFORMANCE_PREFIX}{}\n{COMPLEXITY_PREFIX}{}\n", dict(&perf), dict(&complexity));
        let json = serde_json::json!({"performance": perf, "complexity": complexity, "endpoint": null});
        let line = format!("noise\n{RESULT_PREFIX}{json}\n");
        let from_dicts = parse_run_metrics(&printed);
        let from_json = parse_run_metrics(&line);
        prop_assert_eq!(&from_dicts.performance, &perf);
        prop_assert_eq!(&from_json.performance, &perf);
        prop_assert_eq!(&from_dicts.complexity, &from_json.complexity);
    }

    #[test]
    fn selection_is_always_a_passing_plan(mask in prop::collection::vec(any::<bool>(), 1..6), reply_id in 0usize..8) {
        prop_assume!(mask.iter().any(|x| *x));
        let outcomes: Vec<ExecutionOutcome> = (0..mask.len())
            .map(|i| ExecutionOutcome { plan_id: i, data_outcome: "d".into(), model_outcome: "m".into(), candidates: vec![] })
            .collect();
        let verdicts: Vec<Verdict> = mask.iter().enumerate().map(|(i, p)| Verdict {
            stage: Stage::Execution, plan_id: Some(i), passed: *p,
            rationale: if *p { String::new() } else { "x".into() }, raw_response: String::new(),
        }).collect();
        let gw = Gateway::new(Arc::new(MockBackend::default().respond(&select_tag(0), format!("plan {reply_id}"))));
        let sel = select_best_outcome(&outcomes, &verdicts, &requirements(), 0, &gw).unwrap();
        prop_assert!(mask[sel.plan_id]);
        if mask[reply_id.min(mask.len() - 1)] && reply_id < mask.len() && mask.iter().filter(|x| **x).count() > 1 {
            prop_assert_eq!(sel.plan_id, reply_id);
        }
    }

    #[test]
    fn instruction_never_exceeds_budget_or_drops_constraints(
        data_len in 0usize..20_000, model_len in 0usize..20_000, know_len in 0usize..20_000, budget in 3_000usize..12_000,
    ) {
        let outcome = ExecutionOutcome {
            plan_id: 0, data_outcome: "d".repeat(data_len), model_outcome: "m".repeat(model_len), candidates: vec![],
        };
        let text = synthesize_instruction(&requirements(), &outcome, &"k".repeat(know_len), budget);
        prop_assert!(text.len() <= budget, "{} > {}", text.len(), budget);
        prop_assert!(text.contains("accuracy ≥ 0.98"));
    }

    #[test]
    fn failure_digest_lists_plans_in_order(ids in prop::collection::vec(prop::option::of(0usize..6), 1..8)) {
        let records: Vec<FailureRecord> = ids.iter().map(|id| FailureRecord {
            plan_id: *id, stage: "execution".into(), detail: "reason".into(),
        }).collect();
        let digest = collect_fail_rationale(&records).unwrap();
        prop_assert_eq!(digest.lines().count(), records.len());
        let order: Vec<usize> = digest.lines().map(|l| {
            l.strip_prefix("- plan ").and_then(|r| r.split(' ').next()).and_then(|n| n.parse().ok()).unwrap_or(usize::MAX)
        }).collect();
        prop_assert!(order.windows(2).all(|w| w[0] <= w[1]));
    }
}
