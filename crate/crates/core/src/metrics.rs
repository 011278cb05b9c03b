//! Grading: success-rate levels, normalized performance and the
//! comprehensive score.
//!
//! The formulas are generic over [`num_traits::Float`]; the report types use
//! [`Score`](crate::Score).

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::TaskFamily;
use crate::requirements::{default_direction, Direction, MetricConstraint};
use crate::sandbox::RunResult;
use crate::Score;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingMode {
    ConstraintFree,
    ConstraintAware,
}

impl GradingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradingMode::ConstraintFree => "constraint_free",
            GradingMode::ConstraintAware => "constraint_aware",
        }
    }
}

impl fmt::Display for GradingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradingMode {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "free" | "constraint_free" => Ok(GradingMode::ConstraintFree),
            "aware" | "constraint_aware" => Ok(GradingMode::ConstraintAware),
            other => Err(MetricsError::Domain(format!("unknown grading mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    HigherBetter,
    LossLike,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("domain error: {0}")]
    Domain(String),
}

/// `1 / (1 + s)` for loss-like scores (`s ≥ 0`), identity for higher-better
/// scores in `[0, 1]`.
pub fn compute_nps<F: Float + fmt::Display>(score: F, kind: MetricKind) -> Result<F, MetricsError> {
    match kind {
        MetricKind::LossLike if score >= F::zero() && score.is_finite() => Ok(F::one() / (F::one() + score)),
        MetricKind::LossLike => Err(MetricsError::Domain(format!("loss-like score must be finite and >= 0, got {score}"))),
        MetricKind::HigherBetter if score >= F::zero() && score <= F::one() => Ok(score),
        MetricKind::HigherBetter => {
            Err(MetricsError::Domain(format!("higher-better score must lie in [0, 1], got {score}")))
        }
    }
}

/// `0.5·sr + 0.5·nps`, both arguments in `[0, 1]`.
pub fn compute_cs<F: Float + fmt::Display>(sr: F, nps: F) -> Result<F, MetricsError> {
    let unit = |name: &str, v: F| {
        if v >= F::zero() && v <= F::one() {
            Ok(v)
        } else {
            Err(MetricsError::Domain(format!("{name} must lie in [0, 1], got {v}")))
        }
    };
    let half = F::from(0.5).expect("0.5 is representable");
    Ok(half * unit("sr", sr)? + half * unit("nps", nps)?)
}

/// Identity of a metric after alias resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
enum MetricId {
    Accuracy,
    F1,
    RandIndex,
    Rmsle,
    ModelSize,
    Latency,
    TrainingTime,
    Named(String),
}

const SIZE_UNITS: [&str; 4] = ["b", "kb", "mb", "gb"];

/// Splits a trailing unit token such as `_ms` or ` mb` off a metric name.
fn unit_suffix(name: &str) -> Option<(&str, &str)> {
    let (base, unit) = name.trim_end().rsplit_once(['_', ' '])?;
    let lower = unit.to_lowercase();
    let known = seconds_per_unit_token(&lower).is_some() || SIZE_UNITS.contains(&lower.as_str());
    (known && base.chars().any(char::is_alphanumeric)).then_some((base, unit))
}

fn canonical_key(name: &str) -> String {
    let without_units = match name.find('(') {
        Some(i) if i > 0 => &name[..i],
        _ => unit_suffix(name).map_or(name, |(base, _)| base),
    };
    without_units.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect()
}

fn metric_id(name: &str) -> MetricId {
    let key = canonical_key(name);
    match key.as_str() {
        "acc" | "accuracy" | "testaccuracy" => MetricId::Accuracy,
        "f1" | "f1score" | "fscore" | "f1macro" | "macrof1" => MetricId::F1,
        "ri" | "randindex" | "randscore" => MetricId::RandIndex,
        "rmsle" | "rootmeansquaredlogerror" | "rootmeansquaredlogarithmicerror" => MetricId::Rmsle,
        "modelsize" | "size" | "modelsizemb" | "sizemb" => MetricId::ModelSize,
        "latency" | "inferencelatency" | "inferencetime" | "inferencelatencyms" => MetricId::Latency,
        "trainingtime" | "traintime" | "trainingduration" => MetricId::TrainingTime,
        _ => MetricId::Named(key),
    }
}

/// Seconds per unit for a time unit found in `text` (explicit units or a
/// parenthesized suffix such as `(ms)`), if any.
fn seconds_per_unit(text: &str) -> Option<f64> {
    let lower = text.to_lowercase();
    let unit = match (lower.find('('), lower.rfind(')')) {
        (Some(a), Some(b)) if a < b => lower[a + 1..b].trim(),
        _ => unit_suffix(&lower).map_or(lower.trim(), |(_, u)| u),
    };
    seconds_per_unit_token(unit)
}

fn seconds_per_unit_token(unit: &str) -> Option<f64> {
    match unit {
        "ms" | "millisecond" | "milliseconds" => Some(1e-3),
        "s" | "sec" | "secs" | "second" | "seconds" => Some(1.0),
        "m" | "min" | "mins" | "minute" | "minutes" => Some(60.0),
        "h" | "hr" | "hrs" | "hour" | "hours" => Some(3600.0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResult {
    pub constraint: MetricConstraint,
    pub observed: Option<Score>,
    pub satisfied: bool,
}

/// Resolves the constraint's metric in the run and compares it.
///
/// Lookup order is performance, complexity, then built-ins (training time
/// from the run duration). Time values are compared in seconds.
pub fn check_constraint(c: &MetricConstraint, result: &RunResult) -> ConstraintResult {
    let wanted = metric_id(&c.name);
    let is_time = matches!(wanted, MetricId::Latency | MetricId::TrainingTime);
    let found = result
        .performance
        .iter()
        .chain(&result.complexity)
        .find(|(key, _)| metric_id(key) == wanted)
        .map(|(key, v)| {
            let scale = if is_time { seconds_per_unit(key).unwrap_or(1.0) } else { 1.0 };
            v * scale
        })
        .or_else(|| (wanted == MetricId::TrainingTime && result.exit_code == 0).then_some(result.duration_secs));

    let observed_native = found.map(|v| {
        if is_time {
            v / threshold_scale(c)
        } else {
            v
        }
    });
    let satisfied = match (observed_native, c.value) {
        (Some(obs), Some(target)) => match c.effective_direction() {
            Direction::AtLeast => obs >= target,
            Direction::AtMost => obs <= target,
        },
        (Some(_), None) => true,
        (None, _) => false,
    };
    ConstraintResult { constraint: c.clone(), observed: observed_native, satisfied }
}

fn threshold_scale(c: &MetricConstraint) -> f64 {
    c.units.as_deref().and_then(seconds_per_unit).or_else(|| seconds_per_unit(&c.name)).unwrap_or(1.0)
}

/// Success-rate level of a run.
///
/// Constraint-free: 0 (not runnable), 0.5 (runnable), 1.0 (runnable with an
/// endpoint). Constraint-aware: 0, 0.25 (runnable), 0.5 (deployed, nothing
/// satisfied), 0.75 (deployed, some but not all satisfied), 1.0 (deployed,
/// all satisfied).
pub fn grade_success(result: &RunResult, constraints: &[MetricConstraint], mode: GradingMode) -> Score {
    if !result.is_runnable() {
        return 0.0;
    }
    let deployed = result.endpoint.is_some();
    match mode {
        GradingMode::ConstraintFree => {
            if deployed {
                1.0
            } else {
                0.5
            }
        }
        GradingMode::ConstraintAware => {
            if !deployed {
                return 0.25;
            }
            let satisfied = constraints.iter().filter(|c| check_constraint(c, result).satisfied).count();
            if satisfied == constraints.len() {
                1.0
            } else if satisfied == 0 {
                0.5
            } else {
                0.75
            }
        }
    }
}

/// The metric the normalized score is computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpsMetric {
    pub name: String,
    pub kind: MetricKind,
}

impl NpsMetric {
    pub fn new(name: impl Into<String>, kind: MetricKind) -> Self {
        Self { name: name.into(), kind }
    }

    /// Kind inferred from the name: loss, error, time and size metrics are
    /// loss-like.
    pub fn inferred(name: impl Into<String>) -> Self {
        let name = name.into();
        let kind = match default_direction(&name) {
            Direction::AtMost => MetricKind::LossLike,
            Direction::AtLeast => MetricKind::HigherBetter,
        };
        Self { name, kind }
    }
}

/// Accuracy for image, text and node classification, F1 for tabular
/// classification, RMSLE for regression and forecasting, Rand index for
/// clustering.
pub fn designated_metric(family: TaskFamily) -> NpsMetric {
    match family {
        TaskFamily::ImageClassification | TaskFamily::TextClassification | TaskFamily::NodeClassification => {
            NpsMetric::new("accuracy", MetricKind::HigherBetter)
        }
        TaskFamily::TabularClassification => NpsMetric::new("F1", MetricKind::HigherBetter),
        TaskFamily::TabularRegression | TaskFamily::TimeSeriesForecasting => {
            NpsMetric::new("RMSLE", MetricKind::LossLike)
        }
        TaskFamily::TabularClustering => NpsMetric::new("RI", MetricKind::HigherBetter),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: GradingMode,
    pub sr: Score,
    pub nps: Score,
    pub cs: Score,
    pub nps_metric: NpsMetric,
    pub nps_observed: Option<Score>,
    pub constraint_results: Vec<ConstraintResult>,
    pub notes: Vec<String>,
}

/// Grades a run. A run that is not runnable scores `nps = 0`.
pub fn grade(result: &RunResult, constraints: &[MetricConstraint], mode: GradingMode, nps_metric: &NpsMetric) -> MetricReport {
    let mut notes = Vec::new();
    let sr = grade_success(result, constraints, mode);
    let constraint_results = match mode {
        GradingMode::ConstraintFree => Vec::new(),
        GradingMode::ConstraintAware => constraints.iter().map(|c| check_constraint(c, result)).collect(),
    };

    let wanted = metric_id(&nps_metric.name);
    let nps_observed = result.performance.iter().find(|(k, _)| metric_id(k) == wanted).map(|(_, v)| *v);
    let nps = if !result.is_runnable() {
        notes.push("run is not runnable; nps defaults to 0".to_string());
        0.0
    } else {
        match nps_observed {
            None => {
                notes.push(format!("metric `{}` not reported; nps defaults to 0", nps_metric.name));
                0.0
            }
            Some(v) => compute_nps(v, nps_metric.kind).unwrap_or_else(|e| {
                notes.push(format!("{e}; nps defaults to 0"));
                0.0
            }),
        }
    };
    let cs = compute_cs(sr, nps).expect("sr and nps lie in [0, 1]");
    MetricReport { mode, sr, nps, cs, nps_metric: nps_metric.clone(), nps_observed, constraint_results, notes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn run(perf: &[(&str, f64)], complexity: &[(&str, f64)], endpoint: bool, exit_code: i32) -> RunResult {
        RunResult {
            exit_code,
            stdout: String::new(),
            stderr: String::new(),
            duration_secs: 30.0,
            performance: perf.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            complexity: complexity.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
            endpoint: endpoint.then(|| "http://127.0.0.1:7860".into()),
            timed_out: false,
        }
    }

    #[test]
    fn nps_examples() {
        assert_eq!(compute_nps(0.0, MetricKind::LossLike).unwrap(), 1.0);
        assert_eq!(compute_nps(1.0, MetricKind::LossLike).unwrap(), 0.5);
        assert_eq!(compute_nps(0.804, MetricKind::HigherBetter).unwrap(), 0.804);
        assert_eq!(compute_nps(0.5f32, MetricKind::LossLike).unwrap(), 1.0 / 1.5);
        assert!(compute_nps(-0.1, MetricKind::LossLike).is_err());
        assert!(compute_nps(1.2, MetricKind::HigherBetter).is_err());
        assert!(compute_nps(f64::NAN, MetricKind::HigherBetter).is_err());
    }

    #[test]
    fn cs_examples() {
        assert!((compute_cs(1.0, 0.804).unwrap() - 0.902).abs() < 1e-12);
        assert!((compute_cs(0.871, 0.810).unwrap() - 0.8405).abs() < 1e-12);
        assert_eq!(compute_cs(0.0, 0.0).unwrap(), 0.0);
        assert!(compute_cs(1.5, 0.0).is_err());
    }

    #[test]
    fn constraint_checks() {
        let acc = MetricConstraint::new("accuracy", 0.98);
        let r = run(&[("ACC", 0.985)], &[], true, 0);
        let res = check_constraint(&acc, &r);
        assert!(res.satisfied);
        assert_eq!(res.observed, Some(0.985));

        let rmsle = MetricConstraint::new("RMSLE", 1.0);
        assert!(!check_constraint(&rmsle, &run(&[("RMSLE", 1.2)], &[], true, 0)).satisfied);

        let missing = check_constraint(&MetricConstraint::new("F1", 0.5), &r);
        assert!(!missing.satisfied);
        assert_eq!(missing.observed, None);
    }

    #[test]
    fn aliases_resolve() {
        let r = run(&[("f1_score", 0.7), ("rand_index", 0.6)], &[("Model Size (MB)", 10.0)], true, 0);
        assert!(check_constraint(&MetricConstraint::new("F1", 0.6), &r).satisfied);
        assert!(check_constraint(&MetricConstraint::new("RI", 0.5), &r).satisfied);
        assert!(check_constraint(&MetricConstraint::new("model size", 20.0), &r).satisfied);
    }

    #[test]
    fn snake_case_unit_suffixes_resolve() {
        let r = run(&[("ACC", 0.9)], &[("inference_time_ms", 120.0), ("model_size_mb", 40.0)], true, 0);
        let res = check_constraint(&MetricConstraint::new("inference_time", 150.0).with_units("ms"), &r);
        assert_eq!(res.observed, Some(120.0));
        assert!(res.satisfied);
        assert!(!check_constraint(&MetricConstraint::new("model size", 20.0), &r).satisfied);
        assert_eq!(metric_id("f1_s"), MetricId::F1);
        assert_eq!(metric_id("_ms"), MetricId::Named("ms".into()));
    }

    #[test]
    fn time_constraints_convert_units() {
        let r = run(&[("ACC", 0.9)], &[("Inference Latency (ms)", 120.0)], true, 0);
        let c = MetricConstraint::new("inference latency", 0.2).with_units("seconds");
        let res = check_constraint(&c, &r);
        assert!(res.satisfied);
        assert!((res.observed.unwrap() - 0.12).abs() < 1e-12);

        let train = MetricConstraint::new("training time", 1.0).with_units("minutes");
        let res = check_constraint(&train, &r);
        assert_eq!(res.observed, Some(0.5));
        assert!(res.satisfied);
    }

    #[test]
    fn success_levels() {
        let two = [MetricConstraint::new("accuracy", 0.98), MetricConstraint::new("F1", 0.99)];
        use GradingMode::*;
        assert_eq!(grade_success(&run(&[], &[], false, 1), &two, ConstraintAware), 0.0);
        assert_eq!(grade_success(&run(&[("ACC", 0.99)], &[], false, 0), &two, ConstraintAware), 0.25);
        assert_eq!(grade_success(&run(&[("ACC", 0.5), ("F1", 0.5)], &[], true, 0), &two, ConstraintAware), 0.5);
        assert_eq!(grade_success(&run(&[("ACC", 0.99), ("F1", 0.5)], &[], true, 0), &two, ConstraintAware), 0.75);
        assert_eq!(grade_success(&run(&[("ACC", 0.99), ("F1", 0.995)], &[], true, 0), &two, ConstraintAware), 1.0);
        assert_eq!(grade_success(&run(&[("ACC", 0.9)], &[], false, 1), &[], ConstraintFree), 0.0);
        assert_eq!(grade_success(&run(&[("ACC", 0.9)], &[], false, 0), &[], ConstraintFree), 0.5);
        assert_eq!(grade_success(&run(&[("ACC", 0.9)], &[], true, 0), &[], ConstraintFree), 1.0);
    }

    #[test]
    fn report_for_crashed_run() {
        let r = run(&[("ACC", 0.9)], &[], true, 1);
        let rep = grade(&r, &[], GradingMode::ConstraintFree, &designated_metric(TaskFamily::ImageClassification));
        assert_eq!((rep.sr, rep.nps, rep.cs), (0.0, 0.0, 0.0));
        assert!(rep.constraint_results.is_empty());
    }

    #[test]
    fn report_uses_designated_metric() {
        let r = run(&[("ACC", 0.9), ("F1", 0.8)], &[], true, 0);
        let rep = grade(&r, &[MetricConstraint::new("accuracy", 0.85)], GradingMode::ConstraintAware,
            &designated_metric(TaskFamily::TabularClassification));
        assert_eq!(rep.nps, 0.8);
        assert_eq!(rep.sr, 1.0);
        assert!((rep.cs - 0.9).abs() < 1e-12);
        assert_eq!(rep.constraint_results.len(), 1);

        let loss = run(&[("RMSLE", 0.25)], &[], false, 0);
        let rep = grade(&loss, &[], GradingMode::ConstraintFree, &designated_metric(TaskFamily::TabularRegression));
        assert_eq!(rep.nps, 0.8);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("free".parse::<GradingMode>().unwrap(), GradingMode::ConstraintFree);
        assert_eq!("constraint-aware".parse::<GradingMode>().unwrap(), GradingMode::ConstraintAware);
        assert!("strict".parse::<GradingMode>().is_err());
    }
}
