//! Numeric comparison of two run directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::runner::MANIFEST;

/// Largest relative difference found in one column (CSV) or key (text).
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDiff {
    pub file: String,
    pub column: String,
    pub max_rel: f64,
    pub exceeds: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffReport {
    /// Columns with a nonzero difference.
    pub columns: Vec<ColumnDiff>,
    /// Missing files, shape mismatches and differing non-numeric cells.
    pub structural: Vec<String>,
}

impl DiffReport {
    pub fn passed(&self) -> bool {
        self.structural.is_empty() && self.columns.iter().all(|c| !c.exceeds)
    }

    pub fn is_empty(&self) -> bool {
        self.structural.is_empty() && self.columns.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.structural {
            out.push_str(&format!("structural: {s}\n"));
        }
        for c in &self.columns {
            let mark = if c.exceeds { "FAIL" } else { "ok" };
            out.push_str(&format!("{mark} {} [{}] max_rel = {:e}\n", c.file, c.column, c.max_rel));
        }
        out
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both are equal.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let scale = a.abs().max(b.abs());
    if scale == 0.0 || !scale.is_finite() {
        return f64::INFINITY;
    }
    (a - b).abs() / scale
}

fn manifest_files(dir: &Path) -> CliResult<BTreeSet<String>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| CliError::Diff(format!("{}: cannot read manifest: {e}", dir.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| l.split_once("  ").map(|(_, name)| name.to_owned()))
        .collect())
}

struct Tracker<'a> {
    file: &'a str,
    rel_tol: f64,
    report: &'a mut DiffReport,
}

impl Tracker<'_> {
    fn cells(&mut self, column: &str, a: &str, b: &str, where_: impl Fn() -> String) -> f64 {
        if a == b {
            return 0.0;
        }
        match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => rel_diff(x, y),
            _ => {
                self.report.structural.push(format!("{} [{column}] {}: `{a}` vs `{b}`", self.file, where_()));
                0.0
            }
        }
    }

    fn push(&mut self, column: &str, max_rel: f64) {
        if max_rel > 0.0 {
            self.report.columns.push(ColumnDiff {
                file: self.file.to_owned(),
                column: column.to_owned(),
                max_rel,
                exceeds: max_rel > self.rel_tol,
            });
        }
    }
}

fn diff_csv(t: &mut Tracker, a: &str, b: &str) {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.first() != lb.first() {
        t.report.structural.push(format!("{}: headers differ", t.file));
        return;
    }
    if la.len() != lb.len() {
        t.report.structural.push(format!("{}: {} rows vs {}", t.file, la.len(), lb.len()));
        return;
    }
    let header: Vec<&str> = la.first().map_or(Vec::new(), |h| h.split(',').collect());
    let mut worst = vec![0.0_f64; header.len()];
    for (row, (ra, rb)) in la.iter().zip(&lb).enumerate().skip(1) {
        let (ca, cb): (Vec<&str>, Vec<&str>) = (ra.split(',').collect(), rb.split(',').collect());
        if ca.len() != header.len() || cb.len() != header.len() {
            t.report.structural.push(format!("{}: line {} has the wrong column count", t.file, row + 1));
            return;
        }
        for (j, col) in header.iter().enumerate() {
            let d = t.cells(col, ca[j], cb[j], || format!("line {}", row + 1));
            worst[j] = worst[j].max(d);
        }
    }
    for (j, col) in header.iter().enumerate() {
        t.push(col, worst[j]);
    }
}

fn key_values(text: &str) -> Vec<(&str, &str)> {
    text.lines().filter_map(|l| l.split_once(" = ")).collect()
}

fn diff_text(t: &mut Tracker, a: &str, b: &str) {
    let (ka, kb) = (key_values(a), key_values(b));
    if ka.iter().map(|p| p.0).ne(kb.iter().map(|p| p.0)) {
        t.report.structural.push(format!("{}: keys differ", t.file));
        return;
    }
    for ((k, va), (_, vb)) in ka.iter().zip(&kb) {
        let d = t.cells(k, va, vb, String::new);
        t.push(k, d);
    }
}

/// Compares every artifact listed in the two manifests. CSV files are
/// compared per column and `key = value` text files per key. Plots are
/// skipped since they follow from the tables; other files must match
/// byte for byte.
pub fn diff_artifacts(dir_a: &Path, dir_b: &Path, rel_tol: f64) -> CliResult<DiffReport> {
    let (fa, fb) = (manifest_files(dir_a)?, manifest_files(dir_b)?);
    let mut report = DiffReport::default();
    for name in fa.symmetric_difference(&fb) {
        let side = if fa.contains(name) { dir_b } else { dir_a };
        report.structural.push(format!("{name}: missing from {}", side.display()));
    }
    for name in fa.intersection(&fb) {
        let read = |d: &Path| fs::read(d.join(name));
        let (a, b) = match (read(dir_a), read(dir_b)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                report.structural.push(format!("{name}: listed but unreadable"));
                continue;
            }
        };
        if a == b {
            continue;
        }
        let (sa, sb) = (String::from_utf8_lossy(&a), String::from_utf8_lossy(&b));
        let mut t = Tracker { file: name, rel_tol, report: &mut report };
        if name.ends_with(".csv") {
            diff_csv(&mut t, &sa, &sb);
        } else if name.ends_with(".txt") {
            diff_text(&mut t, &sa, &sb);
        } else if name.ends_with(".svg") {
            // plots follow from the compared tables
        } else {
            report.structural.push(format!("{name}: contents differ"));
        }
    }
    Ok(report)
}
