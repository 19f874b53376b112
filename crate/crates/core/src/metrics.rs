//! Per-iteration training metrics and their CSV form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BASE_COLUMNS: [&str; 12] = [
    "iteration",
    "env_steps_cumulative",
    "grad_updates_cumulative",
    "eval_score_mean",
    "eval_score_std",
    "mean_entropy",
    "kappa",
    "mean_ratio",
    "ratio_log_variance",
    "kl_to_ref",
    "groups_kept",
    "groups_dropped",
];

#[derive(Debug, Clone, PartialEq)]
pub struct IterMetrics {
    pub iteration: usize,
    pub env_steps_cumulative: u64,
    pub grad_updates_cumulative: u64,
    pub eval_score_mean: f64,
    pub eval_score_std: f64,
    pub mean_entropy: f64,
    pub kappa: f64,
    pub mean_ratio: f64,
    pub ratio_log_variance: f64,
    pub kl_to_ref: f64,
    pub groups_kept: u64,
    pub groups_dropped: u64,
    /// Not written to CSV; kept for sparse-task reporting.
    pub eval_success_rate: f64,
    /// Algorithm-specific trailing columns.
    pub extras: Vec<(&'static str, f64)>,
}

/// Running means over the updates of one iteration. Empty means are NaN.
#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    n: usize,
    entropy: f64,
    ratio: f64,
    log_var: f64,
    kl: f64,
}

impl UpdateStats {
    pub fn push(&mut self, entropy: f64, ratio: f64, log_var: f64, kl: f64) {
        self.n += 1;
        self.entropy += entropy;
        self.ratio += ratio;
        self.log_var += log_var;
        self.kl += kl;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// `(entropy, ratio, log-ratio variance, kl)`.
    pub fn means(&self) -> (f64, f64, f64, f64) {
        if self.n == 0 {
            return (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
        }
        let n = self.n as f64;
        (self.entropy / n, self.ratio / n, self.log_var / n, self.kl / n)
    }
}

/// Mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Render rows as CSV. The first line is a `#` comment carrying `header_note`.
pub fn to_csv(rows: &[IterMetrics], header_note: &str) -> String {
    let mut out = String::new();
    if !header_note.is_empty() {
        let _ = writeln!(out, "# {header_note}");
    }
    let mut cols: Vec<&str> = BASE_COLUMNS.to_vec();
    if let Some(first) = rows.first() {
        cols.extend(first.extras.iter().map(|(k, _)| *k));
    }
    out.push_str(&cols.join(","));
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.env_steps_cumulative,
            r.grad_updates_cumulative,
            r.eval_score_mean,
            r.eval_score_std,
            r.mean_entropy,
            r.kappa,
            r.mean_ratio,
            r.ratio_log_variance,
            r.kl_to_ref,
            r.groups_kept,
            r.groups_dropped
        );
        for (_, v) in &r.extras {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn csv_digest(csv: &str) -> String {
    hex::encode(Sha256::digest(csv.as_bytes()))
}

/// A parsed metrics CSV: column names and numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub note: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn parse_csv(text: &str) -> Result<MetricsTable> {
    let mut note = None;
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(rest) = line.strip_prefix('#') {
            note.get_or_insert_with(|| rest.trim().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        match &columns {
            None => columns = Some(line.split(',').map(|s| s.trim().to_string()).collect()),
            Some(cols) => {
                let vals: Vec<f64> = line
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse { line: line_no, msg: format!("not a number: {s:?}") }))
                    .collect::<Result<_>>()?;
                if vals.len() != cols.len() {
                    return Err(Error::Parse { line: line_no, msg: format!("expected {} fields, found {}", cols.len(), vals.len()) });
                }
                rows.push(vals);
            }
        }
    }
    let columns = columns.ok_or_else(|| Error::Parse { line: 1, msg: "missing header row".into() })?;
    Ok(MetricsTable { note, columns, rows })
}

pub fn read_csv(path: &Path) -> Result<MetricsTable> {
    parse_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize) -> IterMetrics {
        IterMetrics {
            iteration: i,
            env_steps_cumulative: 100 * i as u64,
            grad_updates_cumulative: 8 * i as u64,
            eval_score_mean: 0.1 * i as f64,
            eval_score_std: 1.0,
            mean_entropy: -1.5,
            kappa: 0.2,
            mean_ratio: 1.0,
            ratio_log_variance: f64::NAN,
            kl_to_ref: 0.0,
            groups_kept: 3,
            groups_dropped: 1,
            eval_success_rate: 0.0,
            extras: vec![("value_loss", 0.25)],
        }
    }

    #[test]
    fn csv_round_trips_through_parser() {
        let csv = to_csv(&[row(1), row(2)], "config_hash=abc");
        let t = parse_csv(&csv).unwrap();
        assert_eq!(t.note.as_deref(), Some("config_hash=abc"));
        assert_eq!(t.columns.len(), 13);
        assert_eq!(t.column("eval_score_mean").unwrap(), vec![0.1, 0.2]);
        assert!(t.column("ratio_log_variance").unwrap()[0].is_nan());
        assert_eq!(t.column("value_loss").unwrap(), vec![0.25, 0.25]);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = parse_csv("a,b\n1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
