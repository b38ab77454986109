//! Experiment reports: rows of named statistics with CSV and JSON serialization.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// Verdict of a check or of a whole experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
        }
    }

    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    /// Fail dominates, then inconclusive.
    pub fn combine(self, other: Status) -> Status {
        match (self, other) {
            (Status::Fail, _) | (_, Status::Fail) => Status::Fail,
            (Status::Inconclusive, _) | (_, Status::Inconclusive) => Status::Inconclusive,
            _ => Status::Pass,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 2,
            Status::Inconclusive => 3,
        }
    }
}

/// One CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub kernel: String,
    pub nu: String,
    pub p: Option<f64>,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    pub t: Option<f64>,
    pub s: Option<f64>,
    pub statistic: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub status: Option<Status>,
}

/// Named statistics of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub kernel: String,
    pub nu: String,
    pub p: Option<f64>,
    pub notes: Vec<String>,
    pub rows: Vec<Row>,
    pub status: Status,
    pub config: serde_json::Value,
}

pub const CSV_HEADER: &str = "experiment,kernel,nu,p,R,t,s,statistic,value,stderr,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ExperimentReport {
    pub fn new(experiment: &str, kernel: &str, nu: &str, p: Option<f64>) -> Self {
        ExperimentReport {
            experiment: experiment.into(),
            kernel: kernel.into(),
            nu: nu.into(),
            p,
            notes: Vec::new(),
            rows: Vec::new(),
            status: Status::Pass,
            config: serde_json::Value::Null,
        }
    }

    pub fn note(&mut self, text: impl Into<String>) -> &mut Self {
        self.notes.push(text.into());
        self
    }

    /// Appends a statistic; `(R, t, s)` locate it.
    pub fn push(
        &mut self,
        statistic: &str,
        (r, t, s): (Option<f64>, Option<f64>, Option<f64>),
        value: f64,
        stderr: Option<f64>,
        status: Option<Status>,
    ) -> &mut Self {
        self.rows.push(Row {
            experiment: self.experiment.clone(),
            kernel: self.kernel.clone(),
            nu: self.nu.clone(),
            p: self.p,
            r,
            t,
            s,
            statistic: statistic.into(),
            value,
            stderr,
            status,
        });
        self
    }

    /// Folds a check into the overall status and records it as a row.
    pub fn check(&mut self, statistic: &str, loc: (Option<f64>, Option<f64>, Option<f64>), value: f64, status: Status) -> &mut Self {
        self.status = self.status.combine(status);
        self.push(statistic, loc, value, None, Some(status))
    }

    /// Copies the rows of `other` under `prefix.statistic` and folds its status in.
    pub fn absorb(&mut self, prefix: &str, other: &ExperimentReport) -> &mut Self {
        for n in &other.notes {
            self.notes.push(format!("{prefix}: {n}"));
        }
        for r in &other.rows {
            let mut row = r.clone();
            row.experiment = self.experiment.clone();
            row.statistic = format!("{prefix}.{}", r.statistic);
            self.rows.push(row);
        }
        self.status = self.status.combine(other.status);
        self
    }

    pub fn value(&self, statistic: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.statistic == statistic).map(|r| r.value)
    }

    pub fn rows_named<'a>(&'a self, statistic: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.statistic == statistic)
    }

    /// CSV body (header plus rows), without the timestamp line.
    pub fn csv_body(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        let _ = writeln!(out, "{CSV_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                quote(&r.experiment),
                quote(&r.kernel),
                quote(&r.nu),
                opt(r.p),
                opt(r.r),
                opt(r.t),
                opt(r.s),
                quote(&r.statistic),
                r.value,
                opt(r.stderr),
                r.status.map(|s| s.as_str()).unwrap_or("")
            );
        }
        let _ = writeln!(out, "{},{},{},{},,,,overall,,,{}", quote(&self.experiment), quote(&self.kernel), quote(&self.nu), opt(self.p), self.status.as_str());
        out
    }

    /// CSV with a leading timestamp comment.
    pub fn to_csv(&self, timestamp: &str) -> String {
        format!("# generated {timestamp}\n{}", self.csv_body())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::Io(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path, timestamp: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(timestamp))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_algebra() {
        use Status::*;
        assert_eq!(Pass.combine(Pass), Pass);
        assert_eq!(Pass.combine(Inconclusive), Inconclusive);
        assert_eq!(Inconclusive.combine(Fail), Fail);
        assert_eq!([Pass, Fail, Inconclusive].map(|s| s.exit_code()), [0, 2, 3]);
    }

    #[test]
    fn absorb_prefixes_and_combines() {
        let mut a = ExperimentReport::new("suite", "k", "nu", None);
        let mut b = ExperimentReport::new("part", "k", "nu", None);
        b.check("x", (None, None, None), 1.0, Status::Inconclusive);
        a.absorb("part", &b);
        assert_eq!(a.rows[0].statistic, "part.x");
        assert_eq!(a.rows[0].experiment, "suite");
        assert_eq!(a.status, Status::Inconclusive);
    }

    #[test]
    fn csv_layout() {
        let mut r = ExperimentReport::new("qclt", "gaussian(sd=1)", "rademacher", Some(2.0));
        r.note("bound integrals, not exact norms");
        r.push("d_K", (Some(8.0), Some(1.0), None), 0.0123, Some(0.001), None);
        r.check("monotone", (None, None, None), 1.0, Status::Fail);
        let csv = r.to_csv("2026-01-01T00:00:00Z");
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# generated"));
        assert_eq!(lines[2], CSV_HEADER);
        assert_eq!(lines[3], "qclt,gaussian(sd=1),rademacher,2,8,1,,d_K,0.0123,0.001,");
        assert!(lines[4].ends_with(",FAIL"));
        assert!(lines[5].contains("overall") && lines[5].ends_with("FAIL"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["status"], "FAIL");
        assert_eq!(json["rows"][0]["R"], 8.0);
    }

    #[test]
    fn quoting() {
        let mut r = ExperimentReport::new("x", "centered-two-point(0.25,3,1)", "n", None);
        r.push("a,b", (None, None, None), 1.0, None, None);
        assert!(r.csv_body().contains("\"centered-two-point(0.25,3,1)\""));
        assert!(r.csv_body().contains("\"a,b\""));
    }
}
