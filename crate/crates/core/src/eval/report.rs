use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Evaluation results. The JSON form is a pure function of the inputs; the
/// wall-clock time is carried separately so that repeated evaluations are
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub stage: String,
    pub split: String,
    /// task → metric → value
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    pub counts: BTreeMap<String, usize>,
    pub phi_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn new(run_id: &str, stage: &str, split: &str) -> Self {
        Self {
            run_id: run_id.into(),
            stage: stage.into(),
            split: split.into(),
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            phi_hash: String::new(),
            config_hash: String::new(),
            seed: 0,
            version: String::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn set(&mut self, task: &str, metric: &str, value: f64) {
        self.metrics.entry(task.into()).or_default().insert(metric.into(), value);
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.metrics.get(task)?.get(metric).copied()
    }

    /// First `(task, metric)` whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(String, String)> {
        self.metrics.iter().find_map(|(t, m)| {
            m.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| (t.clone(), k.clone()))
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    /// Flat CSV: a header line and one row. BLEU is shown in percent.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["run_id".to_string(), "stage".into(), "split".into(), "seed".into()];
        let mut row = vec![self.run_id.clone(), self.stage.clone(), self.split.clone(), self.seed.to_string()];
        for (task, m) in &self.metrics {
            for (k, &v) in m {
                let (name, v) = if k == "bleu" { (format!("{task}.bleu_pct"), v * 100.0) } else { (format!("{task}.{k}"), v) };
                header.push(name);
                row.push(format!("{v}"));
            }
        }
        header.push("wall_clock_seconds".into());
        row.push(format!("{:.3}", self.wall_clock_seconds));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_excludes_wall_clock() {
        let mut a = MetricsReport::new("r", "stage2", "test");
        a.set("report", "bleu", 0.5);
        let mut b = a.clone();
        a.wall_clock_seconds = 1.0;
        b.wall_clock_seconds = 2.0;
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.to_csv().contains("report.bleu_pct"));
        assert!(a.to_csv().lines().nth(1).unwrap().contains(",50,"));
    }

    #[test]
    fn non_finite_detected() {
        let mut a = MetricsReport::new("r", "s", "val");
        a.set("image", "fid_proxy", f64::NAN);
        assert_eq!(a.first_non_finite(), Some(("image".into(), "fid_proxy".into())));
    }
}
