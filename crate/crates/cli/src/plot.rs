//! Log-scale SVG line plots of metrics CSVs.

use std::fmt::Write;

use agglo_core::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const LEGEND_W: f64 = 170.0;
const FLOOR: f64 = 1e-12;

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Columns plotted as curves: every loss, not step, lr or balancer weights.
pub fn loss_columns(header: &[String]) -> Vec<usize> {
    header
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "step" && *h != "lr" && !h.starts_with("w_"))
        .map(|(i, _)| i)
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders one polyline per loss column against `step`, log10 on y.
/// Values at or below zero are drawn at a floor of 1e-12.
pub fn render_svg(header: &[String], rows: &[Vec<f64>]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("metrics CSV has no rows".into()));
    }
    let step_col = header
        .iter()
        .position(|h| h == "step")
        .ok_or_else(|| Error::Config("metrics CSV has no step column".into()))?;
    let cols = loss_columns(header);
    if cols.is_empty() {
        return Err(Error::Config("metrics CSV has no loss columns".into()));
    }
    let ly = |v: f64| v.max(FLOOR).log10();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        x0 = x0.min(r[step_col]);
        x1 = x1.max(r[step_col]);
        for &c in &cols {
            if r[c].is_finite() {
                y0 = y0.min(ly(r[c]));
                y1 = y1.max(ly(r[c]));
            }
        }
    }
    if !y0.is_finite() {
        return Err(Error::Config("metrics CSV has no finite loss values".into()));
    }
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND_W;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let mut e = y0 as i64;
    while e as f64 <= y1 {
        let y = py(e as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">1e{e}</text>"##,
            MARGIN + plot_w,
            MARGIN - 4.0,
            y + 4.0
        );
        e += 1;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">step</text>"#,
        MARGIN + plot_w / 2.0,
        HEIGHT - MARGIN / 3.0
    );
    for (k, &c) in cols.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r[c].is_finite())
            .map(|r| format!("{:.2},{:.2}", px(r[step_col]), py(ly(r[c]))))
            .collect();
        let label = escape(&header[c]);
        let _ = writeln!(
            s,
            r#"<polyline data-column="{label}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly_ = MARGIN + 16.0 * k as f64 + 8.0;
        let lx = WIDTH - MARGIN - LEGEND_W + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly_:.2}" x2="{:.2}" y2="{ly_:.2}" stroke="{color}" stroke-width="2"/><text class="legend" x="{:.2}" y="{:.2}" font-size="11">{label}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly_ + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
