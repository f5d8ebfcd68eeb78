//! Experiment output: per-point CSV, a JSON summary and a timing sidecar.

use serde::Serialize;
use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub series: String,
    pub x: f64,
    pub estimate: f64,
    pub std_error: f64,
}

/// A pass/fail check against a declared range, tagged with the acceptance
/// criterion it serves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub criterion: u32,
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

impl Verdict {
    pub fn range(criterion: u32, name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self { criterion, name: name.into(), value, lo, hi, pass: value >= lo && value <= hi }
    }

    pub fn at_least(criterion: u32, name: &str, value: f64, lo: f64) -> Self {
        Self::range(criterion, name, value, lo, f64::INFINITY)
    }

    pub fn at_most(criterion: u32, name: &str, value: f64, hi: f64) -> Self {
        Self::range(criterion, name, value, f64::NEG_INFINITY, hi)
    }

    pub fn flag(criterion: u32, name: &str, pass: bool) -> Self {
        Self { criterion, name: name.into(), value: f64::from(u8::from(pass)), lo: 1.0, hi: 1.0, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultSet {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub points: Vec<Point>,
    pub verdicts: Vec<Verdict>,
    /// Walk steps or samples drawn.
    pub steps: u64,
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    config: ExperimentConfig,
    verdicts: &'a [Verdict],
    steps: u64,
    notes: &'a [String],
    pass: bool,
}

impl ResultSet {
    pub fn new(experiment: &str, config: &ExperimentConfig) -> Self {
        Self { experiment: experiment.into(), config: config.clone(), points: Vec::new(), verdicts: Vec::new(), steps: 0, notes: Vec::new() }
    }

    pub fn point(&mut self, series: &str, x: f64, estimate: f64, std_error: f64) {
        self.points.push(Point { series: series.into(), x, estimate, std_error });
    }

    pub fn verdict(&mut self, v: Verdict) {
        self.verdicts.push(v);
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn find(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf8"))
    }

    pub fn summary_json(&self) -> String {
        // The thread count goes to the timing sidecar only.
        let config = ExperimentConfig { threads: 0, ..self.config.clone() };
        let s = Summary { experiment: &self.experiment, config, verdicts: &self.verdicts, steps: self.steps, notes: &self.notes, pass: self.pass() };
        serde_json::to_string_pretty(&s).expect("serializable")
    }

    /// Writes `<id>.csv` and `<id>.summary.json`, and the wall-clock time to
    /// `<id>.timing.json` so the first two stay reproducible.
    pub fn write(&self, dir: &Path, wall_seconds: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.csv", self.experiment)), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{}.summary.json", self.experiment)), self.summary_json())?;
        let timing = serde_json::json!({ "experiment": self.experiment, "wall_seconds": wall_seconds, "steps": self.steps, "threads": self.config.threads });
        std::fs::write(dir.join(format!("{}.timing.json", self.experiment)), timing.to_string())?;
        Ok(())
    }

    /// One line per verdict.
    pub fn report(&self) -> String {
        self.verdicts
            .iter()
            .map(|v| format!("[{}] criterion {} {}: {} in [{}, {}]", if v.pass { "PASS" } else { "FAIL" }, v.criterion, v.name, v.value, v.lo, v.hi))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_summary() {
        let mut r = ResultSet::new("demo", &ExperimentConfig::canonical(1));
        r.point("tail", 10.0, 0.5, 0.01);
        r.verdict(Verdict::range(7, "hill", 1.7, 1.55, 1.95));
        r.verdict(Verdict::at_least(7, "margin", 0.05, 0.1));
        assert_eq!(r.to_csv().unwrap(), "series,x,estimate,std_error\ntail,10.0,0.5,0.01\n");
        assert!(!r.pass());
        assert!(r.summary_json().contains("\"pass\": false"));
        assert!(r.report().starts_with("[PASS] criterion 7 hill"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), 1.0).unwrap();
        assert!(dir.path().join("demo.timing.json").exists());
    }
}
