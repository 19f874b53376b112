//! Summary of how hindsight relabeling affects importance-ratio stability.

use std::fmt;

use crate::error::{Error, Result};
use crate::metrics::MetricsTable;

/// Log-variance ratio at or above which the instability counts as reproduced.
pub const REPRODUCTION_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityReport {
    /// Per-run median over iterations of `ratio_log_variance`, relabeling on.
    pub on: Vec<f64>,
    pub off: Vec<f64>,
    /// Median of `on` over median of `off`.
    pub ratio: f64,
    pub reproduced: bool,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_median(table: &MetricsTable, max_iterations: Option<usize>) -> Result<f64> {
    let col = table
        .column("ratio_log_variance")
        .ok_or_else(|| Error::Input("metrics table has no ratio_log_variance column".into()))?;
    let take = max_iterations.unwrap_or(col.len()).min(col.len());
    Ok(median(&col[..take]))
}

/// Compare paired runs. Only the first `max_iterations` rows count when given.
pub fn relabel_instability_report(
    on: &[MetricsTable],
    off: &[MetricsTable],
    max_iterations: Option<usize>,
) -> Result<InstabilityReport> {
    if on.is_empty() || off.is_empty() {
        return Err(Error::Input("need at least one run per arm".into()));
    }
    let on_m = on.iter().map(|t| run_median(t, max_iterations)).collect::<Result<Vec<_>>>()?;
    let off_m = off.iter().map(|t| run_median(t, max_iterations)).collect::<Result<Vec<_>>>()?;
    let (a, b) = (median(&on_m), median(&off_m));
    let ratio = if a == b { 1.0 } else if b == 0.0 { f64::INFINITY } else { a / b };
    Ok(InstabilityReport { on: on_m, off: off_m, ratio, reproduced: ratio >= REPRODUCTION_THRESHOLD })
}

fn fmt_num(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

impl fmt::Display for InstabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |xs: &[f64]| xs.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(" ");
        writeln!(f, "relabel on  median log-ratio variance per run: {}", list(&self.on))?;
        writeln!(f, "relabel off median log-ratio variance per run: {}", list(&self.off))?;
        writeln!(f, "on/off ratio: {}", fmt_num(self.ratio))?;
        write!(f, "instability reproduced (ratio >= {REPRODUCTION_THRESHOLD}): {}", if self.reproduced { "yes" } else { "no" })
    }
}
