//! Accuracy-vs-E chart as a standalone SVG document.
//!
//! Every series is a `<g class="series" data-algorithm=..>` holding an optional
//! `band` (mean +- 1 std), one `line` per run of consecutive finite points and a
//! `marker` per point. Legend entries carry `data-algorithm` and appear in order of
//! accuracy at the largest E.

use super::sweep::SweepResult;
use crate::algorithms::Algorithm;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotStyle {
    pub width: f64,
    pub height: f64,
    pub title: String,
    pub y_min: f64,
    pub y_max: f64,
    pub show_bands: bool,
}

impl Default for PlotStyle {
    fn default() -> Self {
        PlotStyle { width: 720.0, height: 480.0, title: "Test accuracy vs training environments".into(), y_min: 0.0, y_max: 1.0, show_bands: true }
    }
}

/// Mean and standard deviation of the per-trial mean test accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub e: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub algorithm: Algorithm,
    pub points: Vec<PlotPoint>,
}

impl Series {
    /// Value at the largest plotted E, `NaN` when that cell failed.
    pub fn final_mean(&self, last_e: usize) -> f64 {
        self.points.iter().find(|p| p.e == last_e).map_or(f64::NAN, |p| p.mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub svg: String,
    pub csv: String,
    /// Legend order.
    pub series: Vec<Series>,
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f"];

fn color(alg: Algorithm) -> &'static str {
    PALETTE[Algorithm::ALL.iter().position(|&a| a == alg).unwrap_or(0) % PALETTE.len()]
}

/// Groups rows into one series per algorithm. Failed trials are dropped; a cell
/// with no successful trial gets a `NaN` point, which the renderer leaves as a gap.
pub fn aggregate(results: &SweepResult) -> Vec<Series> {
    let mut cells: BTreeMap<(Algorithm, usize), Vec<f64>> = BTreeMap::new();
    for r in &results.rows {
        let v = cells.entry((r.algorithm, r.e)).or_default();
        if !r.is_failed() {
            v.push(r.test_acc_mean);
        }
    }
    let mut series: BTreeMap<Algorithm, Vec<PlotPoint>> = BTreeMap::new();
    for ((alg, e), v) in cells {
        let n = v.len();
        let (mean, std) = if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let m = v.iter().sum::<f64>() / n as f64;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt())
        };
        series.entry(alg).or_default().push(PlotPoint { e, mean, std, count: n });
    }
    series.into_iter().map(|(algorithm, points)| Series { algorithm, points }).collect()
}

fn runs(points: &[PlotPoint]) -> Vec<&[PlotPoint]> {
    points.split(|p| !p.mean.is_finite()).filter(|r| !r.is_empty()).collect()
}

pub fn emit_plot(results: &SweepResult, style: &PlotStyle) -> Result<Plot> {
    if results.rows.is_empty() {
        return Err(Error::EmptyResults);
    }
    if !(style.y_max > style.y_min) || !(style.width > 0.0 && style.height > 0.0) {
        return Err(Error::InvalidParameter("degenerate plot geometry".into()));
    }
    let mut series = aggregate(results);
    let e_min = results.rows.iter().map(|r| r.e).min().unwrap_or(0);
    let e_max = results.rows.iter().map(|r| r.e).max().unwrap_or(0);
    series.sort_by(|a, b| {
        let (fa, fb) = (a.final_mean(e_max), b.final_mean(e_max));
        let key = |f: f64| if f.is_nan() { f64::NEG_INFINITY } else { f };
        key(fb).total_cmp(&key(fa)).then(a.algorithm.cmp(&b.algorithm))
    });

    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = style.width - left - right;
    let ph = style.height - top - bottom;
    let (x0, x1) = if e_min == e_max { (e_min as f64 - 1.0, e_max as f64 + 1.0) } else { (e_min as f64, e_max as f64) };
    let sx = |e: f64| left + (e - x0) / (x1 - x0) * pw;
    let sy = |v: f64| {
        let v = v.clamp(style.y_min, style.y_max);
        top + (style.y_max - v) / (style.y_max - style.y_min) * ph
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = style.width,
        h = style.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text class="title" x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, style.width / 2.0, escape(&style.title));

    let _ = writeln!(svg, r#"<g class="axes" stroke="black" font-size="11">"#);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}"/>"#, top + ph);
    let mut es: Vec<usize> = results.rows.iter().map(|r| r.e).collect();
    es.sort_unstable();
    es.dedup();
    for e in &es {
        let x = sx(*e as f64);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}"/>"#, top + ph, top + ph + 4.0);
        let _ = writeln!(svg, r#"<text class="xtick" x="{x:.2}" y="{}" text-anchor="middle" stroke="none">{e}</text>"#, top + ph + 16.0);
    }
    for i in 0..=5 {
        let v = style.y_min + (style.y_max - style.y_min) * i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}"/>"#, left - 4.0);
        let _ = writeln!(svg, r#"<text class="ytick" x="{}" y="{:.2}" text-anchor="end" stroke="none">{v:.2}</text>"#, left - 6.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" stroke="none">training environments E</text>"#, left + pw / 2.0, style.height - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y}" text-anchor="middle" stroke="none" transform="rotate(-90 16 {y})">mean test accuracy</text>"#,
        y = top + ph / 2.0
    );
    let _ = writeln!(svg, "</g>");

    for s in &series {
        let c = color(s.algorithm);
        let _ = writeln!(svg, r#"<g class="series" data-algorithm="{}">"#, s.algorithm);
        for run in runs(&s.points) {
            if style.show_bands && run.len() > 1 {
                let upper = run.iter().map(|p| format!("{:.2},{:.2}", sx(p.e as f64), sy(p.mean + p.std)));
                let lower = run.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.e as f64), sy(p.mean - p.std)));
                let pts: Vec<String> = upper.chain(lower).collect();
                let _ = writeln!(svg, r#"<polygon class="band" points="{}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#, pts.join(" "));
            }
            if run.len() > 1 {
                let pts: Vec<String> = run.iter().map(|p| format!("{:.2},{:.2}", sx(p.e as f64), sy(p.mean))).collect();
                let _ = writeln!(svg, r#"<polyline class="line" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
            }
            for p in run {
                let _ = writeln!(
                    svg,
                    r#"<circle class="marker" data-e="{}" data-mean="{}" cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                    p.e,
                    p.mean,
                    sx(p.e as f64),
                    sy(p.mean)
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }

    let _ = writeln!(svg, r#"<g class="legend" font-size="12">"#);
    for (i, s) in series.iter().enumerate() {
        let y = top + 10.0 + 20.0 * i as f64;
        let x = left + pw + 16.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry" data-algorithm="{a}" data-final="{f}"><rect x="{x}" y="{}" width="12" height="12" fill="{c}"/><text x="{}" y="{}">{a}</text></g>"#,
            y - 10.0,
            x + 18.0,
            y,
            a = s.algorithm,
            f = s.final_mean(e_max),
            c = color(s.algorithm)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");

    let mut csv = String::from("algorithm,E,mean,std,count\n");
    for s in &series {
        for p in &s.points {
            let _ = writeln!(csv, "{},{},{},{},{}", s.algorithm, p.e, p.mean, p.std, p.count);
        }
    }
    Ok(Plot { svg, csv, series })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
