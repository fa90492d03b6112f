//! SVG ratio curves: one panel per prior family, x = r2, y = ratio.
//!
//! The smallest sample size is drawn solid and larger ones dashed; a grey
//! horizontal line marks ratio 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StackError};
use crate::harness::{format_sig10, ExperimentResult, ResultRow};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 320.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi > lo {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        } else {
            let pad = 0.05 * lo.abs().max(0.1);
            (lo - pad, hi + pad)
        };
        Scale {
            lo,
            hi,
            px_lo,
            px_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (count - 1) as f64)
            .collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn panel(out: &mut String, family: &str, rows: &[&ResultRow], x0: f64) {
    let finite = |v: f64| v.is_finite();
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (1.0_f64, 1.0_f64);
    for r in rows {
        xmin = xmin.min(r.r2);
        xmax = xmax.max(r.r2);
        if finite(r.ratio) {
            ymin = ymin.min(r.ratio);
            ymax = ymax.max(r.ratio);
        }
    }
    let sx = Scale::new(xmin, xmax, x0 + LEFT, x0 + PANEL_W - RIGHT);
    let sy = Scale::new(ymin, ymax, PANEL_H - BOTTOM, TOP);

    let _ = writeln!(
        out,
        r#"<g class="panel" data-prior-family="{}">"#,
        escape(family)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">prior family: {}</text>"#,
        x0 + PANEL_W / 2.0,
        escape(family)
    );
    let (left, right, top, bottom) = (sx.px_lo, sx.px_hi, sy.px_hi, sy.px_lo);
    let _ = writeln!(
        out,
        r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    for t in sx.ticks(5) {
        let px = sx.map(t);
        let _ = writeln!(
            out,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="10">{t:.2}</text>"#,
            bottom + 14.0
        );
    }
    for t in sy.ticks(5) {
        let py = sy.map(t);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{py:.2}" text-anchor="end" font-size="10">{t:.3}</text>"#,
            left - 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">R²</text>"#,
        (left + right) / 2.0,
        PANEL_H - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" transform="rotate(-90 {:.2} {:.2})" text-anchor="middle">ratio</text>"#,
        x0 + 16.0,
        (top + bottom) / 2.0,
        x0 + 16.0,
        (top + bottom) / 2.0
    );
    let y1 = sy.map(1.0);
    let _ = writeln!(
        out,
        r##"<line class="reference" x1="{left:.2}" y1="{y1:.2}" x2="{right:.2}" y2="{y1:.2}" stroke="#888888" stroke-width="1"/>"##
    );

    let mut by_n: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_n.entry(r.n).or_default().push(r);
    }
    for (i, (n, mut series)) in by_n.into_iter().enumerate() {
        series.retain(|r| r.ratio.is_finite());
        series.sort_by(|a, b| a.r2.total_cmp(&b.r2));
        let color = COLORS[i % COLORS.len()];
        let dash = if i == 0 {
            ""
        } else {
            r#" stroke-dasharray="6 4""#
        };
        let style = if i == 0 { "solid" } else { "dashed" };
        let pts: Vec<(f64, f64)> = series
            .iter()
            .map(|r| (sx.map(r.r2), sy.map(r.ratio)))
            .collect();
        let points = pts
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            r#"<polyline class="series {style}" data-n="{n}" points="{points}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#
        );
        for ((x, y), r) in pts.iter().zip(&series) {
            let _ = writeln!(
                out,
                r#"<circle class="marker" data-n="{n}" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"><title>n={n}, r2={}, ratio={}</title></circle>"#,
                format_sig10(r.r2),
                format_sig10(r.ratio)
            );
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = right - 90.0;
        let _ = writeln!(
            out,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}" font-size="11">n = {n}</text></g>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0
        );
    }
    out.push_str("</g>\n");
}

/// Renders result rows as a standalone SVG document.
pub fn render_svg(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(StackError::InvalidInput(
            "nothing to plot: result has no cells".into(),
        ));
    }
    let mut groups: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.prior_family.as_str()).or_default().push(r);
    }
    let width = PANEL_W * groups.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, (family, rows)) in groups.into_iter().enumerate() {
        panel(&mut out, family, &rows, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_plot(result: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(&result.rows)?;
    std::fs::write(path, svg).map_err(|e| StackError::io(path, e))
}
