//! File emitters: CSV tables, PGM heatmaps and SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::metrics::AttnMatrix;

/// Gray level used when a matrix has no dynamic range.
pub const FLAT_GRAY: u8 = 128;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// A header plus rows of finite numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        CsvTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Renders the table; fails on any non-finite cell.
    pub fn render(&self) -> Result<String> {
        let mut out = self.columns.join(",");
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(LabError::invalid(format!("csv row {i} has {} cells", row.len())));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(LabError::Degenerate {
                    what: format!("non-finite value in csv column `{}`", self.columns[j]),
                    index: i,
                });
            }
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Encodes `a` as an 8-bit binary PGM, min-max scaled per matrix.
pub fn heatmap_pgm(a: &AttnMatrix) -> Vec<u8> {
    let m = a.matrix();
    let n = m.rows();
    let (lo, hi) = m
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.reserve(n * n);
    let range = hi - lo;
    for &v in m.as_slice() {
        let px = if range > 0.0 {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            FLAT_GRAY
        };
        out.push(px);
    }
    out
}

pub fn emit_heatmap(a: &AttnMatrix, path: &Path) -> Result<()> {
    write_bytes(path, &heatmap_pgm(a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".into() } else { s.to_string() }
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.5 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

/// Renders a standalone SVG with axes, five ticks per axis, a legend and one
/// polyline per series.
pub fn line_plot_svg(plot: &LinePlot) -> Result<String> {
    if plot.series.is_empty() {
        return Err(LabError::invalid("line plot needs at least one series"));
    }
    for s in &plot.series {
        if s.points.len() < 2 {
            return Err(LabError::invalid(format!("series `{}` needs at least two points", s.name)));
        }
        if s.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(LabError::invalid(format!("series `{}` has non-finite points", s.name)));
        }
    }
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (80.0, 170.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let all = || plot.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = padded_range(all().map(|p| p.0));
    let (y0, y1) = padded_range(all().map(|p| p.1));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(&plot.title)
    );
    let _ = writeln!(
        svg,
        r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b}"/></g>"#,
        b = top + ph,
        r = left + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{b5}" stroke="black"/><text x="{px:.2}" y="{bt}" text-anchor="middle">{}</text>"#,
            tick_label(xv),
            b = top + ph,
            b5 = top + ph + 5.0,
            bt = top + ph + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{l5}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/><text x="{lt}" y="{pyt:.2}" text-anchor="end">{}</text>"#,
            tick_label(yv),
            l5 = left - 5.0,
            lt = left - 8.0,
            pyt = py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{cy}" text-anchor="middle" transform="rotate(-90 20 {cy})">{}</text>"#,
        escape(&plot.y_label),
        cy = top + ph / 2.0
    );
    for (i, s) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_line_plot(plot: &LinePlot, path: &Path) -> Result<()> {
    write_bytes(path, line_plot_svg(plot)?.as_bytes())
}
