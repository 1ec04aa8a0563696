//! Report files: aggregate CSV, markdown table and an SVG accuracy plot.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{AggregateReport, Method, RunReport, LITERATURE_ROWS};
use crate::persist::write_atomic;

const PALETTE: [&str; 7] = ["#1f77b4", "#7f7f7f", "#ff7f0e", "#8c564b", "#9467bd", "#d62728", "#2ca02c"];

/// Markdown table of mean ± std (in percent) at test probability `p`, followed
/// by the literature reference rows.
pub fn table_markdown(agg: &AggregateReport, p: f64) -> String {
    let mut out = format!("| Method | Test acc. (p_e = {p:.2}) | Runs |\n|---|---|---|\n");
    for &method in agg.summaries.keys() {
        let Some(s) = agg.at(method, p) else { continue };
        let std = s.std.map(|v| format!(" ± {:.1}", 100.0 * v)).unwrap_or_default();
        let _ = writeln!(out, "| {method} | {:.1}{std} | {} |", 100.0 * s.mean, s.n);
    }
    for (name, mean, std) in LITERATURE_ROWS {
        let _ = writeln!(out, "| {name} | {mean:.1} ± {std:.1} | - |");
    }
    out.push_str("\nStarred rows are published values quoted for reference, not computed here.\n");
    out
}

/// Accuracy against p_e, one line per method with a ±1 std band.
pub fn plot_svg(agg: &AggregateReport) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 210.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xs: Vec<f64> = agg.grid.values().flatten().copied().collect();
    let (x0, x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.1}</text>"##,
            left + pw,
            left - 6.0,
            sy(y) + 4.0,
            py = sy(y)
        );
    }
    let mut ticks = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for &x in &ticks {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x:.1}</text>"#,
            sx(x),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">p_e of test environment</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">test accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (k, (method, sums)) in agg.summaries.iter().enumerate() {
        let color = PALETTE[Method::ALL.iter().position(|m| m == method).unwrap_or(k) % PALETTE.len()];
        let grid = &agg.grid[method];
        if sums.iter().all(|s| s.std.is_some()) {
            let upper = grid.iter().zip(sums).map(|(&x, s)| (x, s.mean + s.std.unwrap_or(0.0)));
            let lower = grid.iter().zip(sums).rev().map(|(&x, s)| (x, s.mean - s.std.unwrap_or(0.0)));
            let points: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                points.join(" ")
            );
        }
        let line: Vec<String> = grid
            .iter()
            .zip(sums)
            .map(|(&x, s)| format!("{:.1},{:.1}", sx(x), sy(s.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 14.0 + 20.0 * k as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{method}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `aggregate.csv`, `table.md` and, if `plot` is set, `plot.svg` into
/// `out`. An empty aggregate is an error and writes nothing.
pub fn emit_report(agg: &AggregateReport, out: &Path, standard_p: f64, plot: bool) -> Result<Vec<PathBuf>> {
    if agg.is_empty() {
        return Err(Error::EmptyReport);
    }
    std::fs::create_dir_all(out)?;
    let mut files = vec![
        (out.join("aggregate.csv"), agg.to_csv()),
        (out.join("table.md"), table_markdown(agg, standard_p)),
    ];
    if plot {
        files.push((out.join("plot.svg"), plot_svg(agg)));
    }
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(files.into_iter().map(|f| f.0).collect())
}

/// Inverse of [`crate::eval::results_csv`]. Rows of one (method, seed) pair
/// must be contiguous.
pub fn parse_results_csv(text: &str) -> Result<Vec<RunReport>> {
    let mut lines = text.lines();
    if lines.next() != Some("method,seed,p_e,accuracy") {
        return Err(Error::CorruptPayload("results CSV header".into()));
    }
    let mut reports: Vec<RunReport> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::CorruptPayload(format!("results CSV line {}: `{line}`", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let [method, seed, p, acc] = fields[..] else {
            return Err(bad());
        };
        let method: Method = method.parse().map_err(|_| bad())?;
        let seed: u64 = seed.parse().map_err(|_| bad())?;
        let p: f64 = p.parse().map_err(|_| bad())?;
        let acc: f64 = acc.parse().map_err(|_| bad())?;
        match reports.last_mut() {
            Some(r) if r.method == method && r.seed == seed => {
                r.grid.push(p);
                r.accuracies.push(acc);
            }
            _ => reports.push(RunReport {
                method,
                seed,
                grid: vec![p],
                accuracies: vec![acc],
                seconds: 0.0,
            }),
        }
    }
    Ok(reports)
}
