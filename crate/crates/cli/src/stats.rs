use serde_json::Value;

/// Scores read from one `report.json`. Runs that did not complete count as
/// zero on every score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub completed: bool,
    pub sr: f64,
    pub nps: f64,
    pub cs: f64,
}

impl Scores {
    pub fn from_report(report: &Value) -> Self {
        let metrics = &report["metrics"];
        let get = |k: &str| metrics[k].as_f64().unwrap_or(0.0);
        let completed = report["outcome"] == "completed";
        if completed {
            Scores { completed, sr: get("sr"), nps: get("nps"), cs: get("cs") }
        } else {
            Scores { completed, sr: 0.0, nps: 0.0, cs: 0.0 }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

pub fn summarize(rows: &[Scores]) -> Vec<(&'static str, MeanStd)> {
    let col = |f: fn(&Scores) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    vec![("SR", mean_std(&col(|s| s.sr))), ("NPS", mean_std(&col(|s| s.nps))), ("CS", mean_std(&col(|s| s.cs)))]
}
