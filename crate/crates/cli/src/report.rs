//! Comparison tables across run directories.

use std::path::{Path, PathBuf};

use jlu::eval::{percent_unlearned, rescaled_score};
use serde_json::Value;

use crate::error::CliError;
use crate::run::{is_complete, SUMMARY_FILE};

pub const REPORT_COLUMNS: [&str; 9] = [
    "run",
    "task",
    "classes",
    "chance",
    "baseline_primary_acc",
    "blind_primary_acc",
    "baseline_probe_acc",
    "blind_probe_acc",
    "pct_unlearned",
];

/// One (run, task) row. Missing networks leave their columns empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub task: String,
    pub classes: usize,
    pub baseline_primary: Option<f64>,
    pub blind_primary: Option<f64>,
    pub baseline_probe: Option<f64>,
    pub blind_probe: Option<f64>,
}

impl ReportRow {
    pub fn chance(&self) -> f64 {
        1.0 / self.classes as f64
    }

    pub fn pct_unlearned(&self) -> Option<f64> {
        let (b, j) = (self.baseline_probe?, self.blind_probe?);
        percent_unlearned(
            rescaled_score(1.0 - b, self.classes),
            rescaled_score(1.0 - j, self.classes),
        )
    }

    fn cells(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        vec![
            self.run.clone(),
            self.task.clone(),
            self.classes.to_string(),
            format!("{:.4}", self.chance()),
            opt(self.baseline_primary),
            opt(self.blind_primary),
            opt(self.baseline_probe),
            opt(self.blind_probe),
            self.pct_unlearned().map(|v| format!("{v:.1}")).unwrap_or_default(),
        ]
    }
}

fn bad_summary(path: &Path, what: &str) -> CliError {
    CliError::Runtime(format!("{}: malformed summary ({what})", path.display()))
}

/// Rows for one completed run directory.
pub fn rows_for(dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|_| bad_summary(&path, "not JSON"))?;
    let run = v["run"]
        .as_str()
        .ok_or_else(|| bad_summary(&path, "run"))?
        .to_string();
    let base = v["networks"].get("baseline");
    let blind = v["networks"].get("jlu");
    let primary = |n: Option<&Value>| n.and_then(|n| n["primary_accuracy"].as_f64());
    let probe = |n: Option<&Value>, task: &str| {
        n.and_then(|n| n["tasks"].as_array())
            .and_then(|ts| ts.iter().find(|t| t["name"] == task))
            .and_then(|t| t["probe_accuracy"].as_f64())
    };
    let tasks = blind
        .or(base)
        .and_then(|n| n["tasks"].as_array())
        .ok_or_else(|| bad_summary(&path, "tasks"))?;
    tasks
        .iter()
        .map(|t| {
            let name = t["name"].as_str().ok_or_else(|| bad_summary(&path, "task name"))?;
            let classes = t["classes"]
                .as_u64()
                .ok_or_else(|| bad_summary(&path, "task classes"))? as usize;
            Ok(ReportRow {
                run: run.clone(),
                task: name.to_string(),
                classes,
                baseline_primary: primary(base),
                blind_primary: primary(blind),
                baseline_probe: probe(base, name),
                blind_probe: probe(blind, name),
            })
        })
        .collect()
}

/// Collects rows from every complete directory; incomplete ones are
/// returned separately so the caller can warn about them.
pub fn collect(dirs: &[PathBuf]) -> Result<(Vec<ReportRow>, Vec<PathBuf>), CliError> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for d in dirs {
        if is_complete(d) {
            rows.extend(rows_for(d)?);
        } else {
            skipped.push(d.clone());
        }
    }
    Ok((rows, skipped))
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join(","));
        out.push('\n');
    }
    out
}

pub fn to_table(rows: &[ReportRow]) -> String {
    let header = [
        "run", "task", "K", "chance", "base acc", "blind acc", "base probe", "blind probe",
        "% unlearned",
    ];
    let body: Vec<Vec<String>> = rows.iter().map(ReportRow::cells).collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
