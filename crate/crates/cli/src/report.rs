use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest round-trip decimal form; exponent notation outside `[1e-4, 1e15)`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Plain statement of the property being checked.
    pub invariant: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: &str, invariant: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            invariant: invariant.into(),
            passed: value <= threshold,
            value,
            threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: &str, invariant: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            invariant: invariant.into(),
            passed: value >= threshold,
            value,
            threshold,
        }
    }

    pub fn holds(name: &str, invariant: &str, passed: bool, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            invariant: invariant.into(),
            passed,
            value,
            threshold,
        }
    }
}

/// Collects checks, warnings, metrics and CSV artifacts for one run.
#[derive(Debug)]
pub struct Report {
    dir: PathBuf,
    experiment: String,
    seed: u64,
    checks: Vec<Check>,
    warnings: Vec<String>,
    metrics: Map<String, Value>,
    artifacts: Vec<String>,
}

impl Report {
    pub fn new(dir: &Path, experiment: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            experiment: experiment.into(),
            seed,
            checks: Vec::new(),
            warnings: Vec::new(),
            metrics: Map::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.metrics.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn checks(&self) -> &[Check] {
        &self.checks
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.artifacts.push(name.into());
        Ok(())
    }

    /// Writes `summary.json` and returns its path.
    pub fn finish(&self) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Summary<'a> {
            schema_version: u32,
            experiment: &'a str,
            seed: u64,
            passed: bool,
            checks: &'a [Check],
            warnings: &'a [String],
            metrics: &'a Map<String, Value>,
            artifacts: &'a [String],
        }
        let s = Summary {
            schema_version: SCHEMA_VERSION,
            experiment: &self.experiment,
            seed: self.seed,
            passed: self.passed(),
            checks: &self.checks,
            warnings: &self.warnings,
            metrics: &self.metrics,
            artifacts: &self.artifacts,
        };
        let path = self.dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&s)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

/// Row of formatted floats.
pub fn row(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|&x| fmt_f64(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_round_trips() {
        for x in [0.0, 1.0, -2.5, 1e-17, 3.0e20, 0.1 + 0.2, 1.0 / 3.0, 5e-324, f64::MAX] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
            assert!(!s.contains(','));
        }
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(1e-10), "1e-10");
    }

    #[test]
    fn summary_written_with_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Report::new(dir.path(), "fv-flow", 3).unwrap();
        r.check(Check::at_most("a", "thing is small", 1.0, 2.0));
        r.check(Check::at_least("b", "thing is large", 1.0, 2.0));
        r.csv("x.csv", &["t", "v"], &[row(&[0.0, 1.5])]).unwrap();
        assert!(!r.passed());
        let text = fs::read_to_string(r.finish().unwrap()).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["passed"], false);
        assert_eq!(v["checks"][0]["passed"], true);
        let csv = fs::read_to_string(dir.path().join("x.csv")).unwrap();
        assert_eq!(csv, "t,v\n0,1.5\n");
    }
}
