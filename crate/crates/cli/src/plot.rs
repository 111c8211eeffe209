//! Deterministic SVG line charts with a CSV sidecar of the plotted values.
//!
//! Output depends only on the input: coordinates are printed with a fixed
//! number of decimals and nothing time- or environment-dependent is written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named sequence plotted against its index.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Series { name: name.into(), values }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG document for `series`; x is the index, y the value.
pub fn render_svg(title: &str, series: &[Series]) -> CliResult<String> {
    if series.is_empty() || series.iter().all(|s| s.values.is_empty()) {
        return Err(CliError::validation("plot needs at least one non-empty series"));
    }
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(CliError::validation("plot has no finite values"));
    }
    if hi - lo < 1e-12 {
        // Constant data: centre it in a unit band.
        lo -= 0.5;
        hi += 0.5;
    }
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(1);
    let x_span = (n.max(2) - 1) as f64;
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |i: usize| MARGIN_L + plot_w * i as f64 / x_span;
    let sy = |v: f64| MARGIN_T + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{MARGIN_L}" y="14" font-size="12" font-family="sans-serif">{}</text>"#, xml_escape(title));
    // Axes.
    let (x0, x1, y0, y1) = (MARGIN_L, MARGIN_L + plot_w, MARGIN_T, MARGIN_T + plot_h);
    let _ = writeln!(svg, r#"<line x1="{x0:.2}" y1="{y1:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#);
    for (v, y) in [(hi, y0), (lo, y1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" font-family="sans-serif" text-anchor="end">{v:.4}</text>"#,
            x0 - 4.0,
            y + 3.0
        );
    }
    for (i, x) in [(0usize, x0), (n - 1, x1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" font-size="10" font-family="sans-serif" text-anchor="middle">{i}</text>"#,
            y1 + 14.0
        );
    }
    // Lines and legend.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = MARGIN_T + 14.0 * k as f64 + 6.0;
        let lx = x1 + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" font-family="sans-serif" class="legend">{}</text>"#,
            lx + 22.0,
            ly + 3.0,
            xml_escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// `index` followed by one column per series; missing and non-finite
/// values are empty cells.
pub fn render_csv(series: &[Series]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["index".to_string()];
    header.extend(series.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend(series.iter().map(|s| match s.values.get(i) {
            Some(v) if v.is_finite() => v.to_string(),
            _ => String::new(),
        }));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `<stem>.svg` and `<stem>.csv`; returns both paths.
pub fn emit_plot(title: &str, series: &[Series], stem: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let svg = render_svg(title, series)?;
    let csv = render_csv(series)?;
    let svg_path = stem.with_extension("svg");
    let csv_path = stem.with_extension("csv");
    std::fs::write(&svg_path, svg).map_err(|e| CliError::io(&svg_path, e))?;
    std::fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    Ok((svg_path, csv_path))
}
