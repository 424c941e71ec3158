//! Plain SVG rendering of critical-difference diagrams and per-instance
//! interval charts, plus the data behind each plot.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdPlotData {
    pub title: String,
    pub methods: Vec<String>,
    pub average_ranks: Vec<f64>,
    pub critical_difference: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBar {
    pub feature: String,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalPlotData {
    pub title: String,
    pub bars: Vec<IntervalBar>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maximal runs of methods (sorted by rank) whose rank spread is within the CD.
fn cliques(sorted_ranks: &[f64], cd: f64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for i in 0..sorted_ranks.len() {
        let mut j = i;
        while j + 1 < sorted_ranks.len() && sorted_ranks[j + 1] - sorted_ranks[i] <= cd {
            j += 1;
        }
        if j > i && out.last().is_none_or(|&(_, e)| j > e) {
            out.push((i, j));
        }
    }
    out
}

/// Methods on a rank axis (best on the left), a CD scale bar, and bars
/// joining groups that are not significantly different.
pub fn cd_diagram_svg(data: &CdPlotData) -> String {
    let k = data.methods.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| data.average_ranks[a].total_cmp(&data.average_ranks[b]).then(a.cmp(&b)));
    let (width, margin) = (720.0, 120.0);
    let axis_y = 80.0;
    let span = (k.max(2) - 1) as f64;
    let x_of = |r: f64| margin + (r - 1.0) / span * (width - 2.0 * margin);
    let half = k.div_ceil(2);
    let height = axis_y + 40.0 + 22.0 * half as f64 + 40.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(&data.title));
    let _ = writeln!(s, r#"<line x1="{}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#, x_of(1.0), x_of(k.max(2) as f64));
    for r in 1..=k.max(2) {
        let x = x_of(r as f64);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{axis_y}" stroke="black"/>"#, axis_y - 6.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{r}</text>"#, axis_y - 10.0);
    }
    let cd_x0 = x_of(1.0);
    let cd_x1 = x_of(1.0 + data.critical_difference.min(span));
    let _ = writeln!(
        s,
        r#"<g class="cd"><line x1="{cd_x0}" y1="40" x2="{cd_x1}" y2="40" stroke="black" stroke-width="2"/><text x="{}" y="34" text-anchor="middle">CD = {:.3}</text></g>"#,
        (cd_x0 + cd_x1) / 2.0,
        data.critical_difference
    );
    for (pos, &m) in order.iter().enumerate() {
        let r = data.average_ranks[m];
        let x = x_of(r);
        let left = pos < half;
        let row = if left { pos } else { k - 1 - pos };
        let y = axis_y + 40.0 + 22.0 * row as f64;
        let (lx, anchor) = if left { (margin - 10.0, "end") } else { (width - margin + 10.0, "start") };
        let _ = writeln!(
            s,
            r#"<g class="method"><polyline points="{x},{axis_y} {x},{y} {lx},{y}" fill="none" stroke="black"/><text x="{}" y="{}" text-anchor="{anchor}">{} ({r:.2})</text></g>"#,
            if left { lx - 4.0 } else { lx + 4.0 },
            y + 4.0,
            escape(&data.methods[m])
        );
    }
    let sorted: Vec<f64> = order.iter().map(|&m| data.average_ranks[m]).collect();
    for (n, (i, j)) in cliques(&sorted, data.critical_difference).into_iter().enumerate() {
        let y = axis_y + 12.0 + 6.0 * n as f64;
        let _ = writeln!(
            s,
            r#"<line class="clique" x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="black" stroke-width="3"/>"#,
            x_of(sorted[i]) - 3.0,
            x_of(sorted[j]) + 3.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars at the point estimates with interval whiskers and a
/// marker at the ground-truth value.
pub fn interval_chart_svg(data: &IntervalPlotData) -> String {
    let (width, left, right, row_h, top) = (720.0, 180.0, 40.0, 26.0, 40.0);
    let height = top + row_h * data.bars.len() as f64 + 40.0;
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for b in &data.bars {
        for v in [b.lo, b.hi, b.truth, b.point] {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if hi - lo <= 0.0 {
        hi = lo + 1.0;
    }
    let x_of = |v: f64| left + (v.clamp(lo, hi) - lo) / (hi - lo) * (width - left - right);
    let zero = x_of(0.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(&data.title));
    let _ = writeln!(s, r#"<line x1="{zero}" y1="{top}" x2="{zero}" y2="{}" stroke="gray"/>"#, height - 30.0);
    for (i, b) in data.bars.iter().enumerate() {
        let y = top + row_h * i as f64;
        let cy = y + row_h / 2.0;
        let px = x_of(b.point);
        let (bx, bw) = if px >= zero { (zero, px - zero) } else { (px, zero - px) };
        let color = if b.point >= 0.0 { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            s,
            r#"<g class="bar"><text x="{}" y="{}" text-anchor="end">{}</text><rect x="{bx}" y="{}" width="{bw}" height="{}" fill="{color}" fill-opacity="0.6"/><line class="whisker" x1="{}" y1="{cy}" x2="{}" y2="{cy}" stroke="black"/><line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/><circle class="truth" cx="{}" cy="{cy}" r="3" fill="black"/></g>"#,
            left - 8.0,
            cy + 4.0,
            escape(&b.feature),
            y + 4.0,
            row_h - 8.0,
            x_of(b.lo),
            x_of(b.hi),
            x_of(b.truth),
        );
    }
    s.push_str("</svg>\n");
    s
}
