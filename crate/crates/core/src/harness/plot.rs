//! Static SVG line charts of a metrics column, averaged over seeds.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::MetricsTable;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One labelled curve: the runs (seeds) whose column is averaged.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub runs: Vec<MetricsTable>,
}

/// Per-iteration `(x, mean, std)` over runs, truncated to the shortest run.
pub fn band(series: &Series, column: &str) -> Result<Vec<(f64, f64, f64)>> {
    let mut cols = Vec::with_capacity(series.runs.len());
    for run in &series.runs {
        cols.push(run.column(column).ok_or_else(|| Error::Input(format!("no column {column:?} in {}", series.label)))?);
    }
    let x = series
        .runs
        .first()
        .and_then(|r| r.column("iteration"))
        .ok_or_else(|| Error::Input(format!("series {} has no iteration column", series.label)))?;
    let n = cols.iter().map(Vec::len).min().unwrap_or(0).min(x.len());
    Ok((0..n)
        .map(|i| {
            let vals: Vec<f64> = cols.iter().map(|c| c[i]).collect();
            let (m, v) = crate::metrics::mean_var(&vals);
            (x[i], m, v.sqrt())
        })
        .collect())
}

/// Render one chart with a mean line and a mean ± std band per series.
pub fn line_chart_svg(series: &[Series], column: &str, title: &str) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    let bands = series.iter().map(|s| band(s, column)).collect::<Result<Vec<_>>>()?;
    let pts = bands.iter().flatten().filter(|(x, m, s)| x.is_finite() && m.is_finite() && s.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, m, s) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if !x0.is_finite() {
        return Err(Error::Input(format!("column {column:?} has no finite values")));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    // Non-finite values are drawn on the axis.
    let clean = |v: f64| if v.is_finite() { v } else { y0 };

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(svg, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{l}" y="{:.2}" font-family="sans-serif" font-size="11">{x0}</text>"#, b + 16.0);
    let _ = writeln!(svg, r#"<text x="{r}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{x1}</text>"#, b + 16.0);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{b}" text-anchor="end" font-family="sans-serif" font-size="11">{y0:.3}</text>"#, l - 4.0);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{t}" text-anchor="end" font-family="sans-serif" font-size="11">{y1:.3}</text>"#, l - 4.0);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(column));

    for (i, (s, pts)) in series.iter().zip(&bands).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = pts.iter().map(|(x, m, sd)| format!("{:.2},{:.2}", px(*x), py(clean(m + sd))));
        let lower = pts.iter().rev().map(|(x, m, sd)| format!("{:.2},{:.2}", px(*x), py(clean(m - sd))));
        let poly: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.join(" "));
        let line: Vec<String> = pts.iter().map(|(x, m, _)| format!("{:.2},{:.2}", px(*x), py(clean(*m)))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{ly:.2}" text-anchor="end" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#, WIDTH - MARGIN - 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
