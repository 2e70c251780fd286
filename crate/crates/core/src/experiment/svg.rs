//! Minimal deterministic SVG emission: a line chart for training curves and
//! a heatmap for grid ablations. Pure string assembly — same data, same
//! bytes — so plots obey the workspace-wide reproducibility contract.

use std::path::Path;

use crate::error::{Error, Result};

use super::report::write_text;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// Series palette; cycles when a chart has more lines than entries.
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Writes a line chart of one or more `(x, y)` series.
pub fn line_chart_svg(
    path: &Path,
    title: &str,
    series: &[(&str, &[(f64, f64)])],
) -> Result<()> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(Error::contract("line chart needs at least one point per series"));
    }
    let all = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // Degenerate ranges still render: pad them to a unit span.
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    ));
    s.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#888\"/>\n",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    ));
    for (v, anchor, x, y) in [
        (x0, "middle", sx(x0), H - MARGIN + 16.0),
        (x1, "middle", sx(x1), H - MARGIN + 16.0),
        (y0, "end", MARGIN - 6.0, sy(y0) + 4.0),
        (y1, "end", MARGIN - 6.0, sy(y1) + 4.0),
    ] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>\n",
            fmt(x),
            fmt(y),
            fmt(v)
        ));
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y)))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            fmt(W - MARGIN + 4.0),
            fmt(MARGIN + 14.0 * i as f64)
        ));
    }
    s.push_str("</svg>\n");
    write_text(path, &s)
}

/// Writes a heatmap of `values[row][col]` with per-cell numbers; color runs
/// blue (minimum) to red (maximum).
pub fn heatmap_svg(
    path: &Path,
    title: &str,
    col_labels: &[String],
    row_labels: &[String],
    values: &[Vec<f64>],
) -> Result<()> {
    if values.len() != row_labels.len()
        || values.iter().any(|row| row.len() != col_labels.len())
        || values.is_empty()
        || col_labels.is_empty()
    {
        return Err(Error::contract("heatmap labels must match the value grid"));
    }
    let flat = values.iter().flatten();
    let lo = flat.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = values.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if hi - lo < 1e-12 { 1.0 } else { hi - lo };
    let cell_w = (W - 2.0 * MARGIN) / col_labels.len() as f64;
    let cell_h = (H - 2.0 * MARGIN) / row_labels.len() as f64;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"monospace\" font-size=\"10\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    ));
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = (v - lo) / span;
            let red = (60.0 + 180.0 * t).round() as u8;
            let blue = (240.0 - 180.0 * t).round() as u8;
            let x = MARGIN + c as f64 * cell_w;
            let y = MARGIN + r as f64 * cell_h;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" \
                 fill=\"rgb({red},90,{blue})\"/>\n",
                fmt(x),
                fmt(y),
                fmt(cell_w),
                fmt(cell_h)
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#fff\">{}</text>\n",
                fmt(x + cell_w / 2.0),
                fmt(y + cell_h / 2.0 + 3.0),
                fmt(v)
            ));
        }
    }
    for (c, label) in col_labels.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            fmt(MARGIN + (c as f64 + 0.5) * cell_w),
            fmt(MARGIN - 8.0)
        ));
    }
    for (r, label) in row_labels.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{label}</text>\n",
            fmt(MARGIN - 6.0),
            fmt(MARGIN + (r as f64 + 0.5) * cell_h + 3.0)
        ));
    }
    s.push_str("</svg>\n");
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_render_deterministically_and_reject_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("line.svg");
        let pts = [(0.0, 0.1), (1.0, 0.4), (2.0, 0.35)];
        line_chart_svg(&line, "curve", &[("a", &pts)]).unwrap();
        let first = std::fs::read(&line).unwrap();
        line_chart_svg(&line, "curve", &[("a", &pts)]).unwrap();
        assert_eq!(first, std::fs::read(&line).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(line_chart_svg(&line, "t", &[("a", &[])]).is_err());

        let heat = dir.path().join("heat.svg");
        heatmap_svg(
            &heat,
            "grid",
            &["c1".into(), "c2".into()],
            &["r1".into()],
            &[vec![1.0, 2.0]],
        )
        .unwrap();
        assert!(std::fs::read_to_string(&heat).unwrap().contains("rect"));
        assert!(heatmap_svg(&heat, "g", &["c".into()], &["r".into()], &[vec![1.0, 2.0]]).is_err());
    }
}
