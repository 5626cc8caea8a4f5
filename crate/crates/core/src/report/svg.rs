// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG line charts.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const REFERENCE_GRAY: &str = "#888888";

const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const LEGEND_W: f64 = 170.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Dashed gray reference line.
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub y_range: Option<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

impl Panel {
    fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let mut x = extent(pts().map(|p| p.0)).unwrap_or((0.0, 1.0));
        if x.0 == x.1 {
            x = (x.0 - 0.5, x.1 + 0.5);
        }
        let y = self.y_range.unwrap_or_else(|| {
            let (lo, hi) = extent(pts().map(|p| p.1)).unwrap_or((0.0, 1.0));
            let pad = ((hi - lo) * 0.08).max(1e-3);
            (lo - pad, hi + pad)
        });
        (x, y)
    }

    fn render_into(&self, out: &mut String, dx: f64) {
        let ((x0, x1), (y0, y1)) = self.ranges();
        let left = dx + MARGIN_L;
        let plot_w = PANEL_W - MARGIN_L - 20.0;
        let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
            left + plot_w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{left:.1}" y="{MARGIN_T:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#333"/>"##
        );
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i as f64 / 4.0;
            let py = sy(y);
            let _ = writeln!(
                out,
                r##"<line x1="{left:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y:.3}</text>"##,
                left + plot_w,
                left - 4.0,
                py + 3.0
            );
        }
        let step = ((x1 - x0) / 12.0).ceil().max(1.0);
        let mut x = x0.ceil();
        while x <= x1 {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{x}</text>"#,
                sx(x),
                MARGIN_T + plot_h + 14.0
            );
            x += step;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            left + plot_w / 2.0,
            PANEL_H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate({:.1},{:.1}) rotate(-90)" font-size="12" text-anchor="middle">{}</text>"#,
            dx + 16.0,
            MARGIN_T + plot_h / 2.0,
            escape(&self.y_label)
        );

        let mut color_idx = 0;
        for s in &self.series {
            let (color, dash) = if s.reference {
                (REFERENCE_GRAY, r#" stroke-dasharray="6,4""#)
            } else {
                let c = PALETTE[color_idx % PALETTE.len()];
                color_idx += 1;
                (c, "")
            };
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                escape(&s.label),
                pts.join(" ")
            );
        }
    }

    fn render_legend(&self, out: &mut String, x: f64) {
        let mut color_idx = 0;
        for (i, s) in self.series.iter().enumerate() {
            let y = MARGIN_T + 10.0 + 18.0 * i as f64;
            let (color, dash) = if s.reference {
                (REFERENCE_GRAY, r#" stroke-dasharray="6,4""#)
            } else {
                let c = PALETTE[color_idx % PALETTE.len()];
                color_idx += 1;
                (c, "")
            };
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
                x + 24.0,
                x + 30.0,
                y + 4.0,
                escape(&s.label)
            );
        }
    }
}

/// Panels side by side; the legend of the first panel sits on the right.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64 + LEGEND_W;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        p.render_into(&mut out, PANEL_W * i as f64);
    }
    if let Some(first) = panels.first() {
        first.render_legend(&mut out, PANEL_W * panels.len() as f64 + 10.0);
    }
    out.push_str("</svg>\n");
    out
}
