//! Static SVG figures: a chromaticity scatter and a line chart with error
//! bars. Output is plain text with fixed number formatting, so identical
//! inputs give identical files.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 8] = ["#d9480f", "#1c7ed6", "#2b8a3e", "#862e9c", "#e67700", "#0b7285", "#c2255c", "#495057"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = range(&mut xs.clone());
        let (y0, y1) = range(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn frame(out: &mut String, a: &Axes, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r#"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, r - l, b - t);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = a.x0 + f * (a.x1 - a.x0);
        let yv = a.y0 + f * (a.y1 - a.y0);
        let (xp, yp) = (a.px(xv), a.py(yv));
        let _ = writeln!(out, r#"<line x1="{xp:.1}" y1="{b:.1}" x2="{xp:.1}" y2="{:.1}" stroke="black"/>"#, b + 5.0);
        let _ = writeln!(out, r#"<text x="{xp:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, b + 18.0);
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{yp:.1}" x2="{l:.1}" y2="{yp:.1}" stroke="black"/>"#, l - 5.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, l - 8.0, yp + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 18.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, labels: &[String]) {
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(out, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 8.0, color(i));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 16.0, y + 1.0, escape(label));
    }
}

/// One point of a scatter plot, coloured by `class` (an index into `classes`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

pub fn scatter(title: &str, xlabel: &str, ylabel: &str, points: &[ScatterPoint], classes: &[String]) -> String {
    let a = Axes::fit(points.iter().map(|p| p.x), points.iter().map(|p| p.y));
    let mut out = String::new();
    frame(&mut out, &a, title, xlabel, ylabel);
    for p in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
            a.px(p.x),
            a.py(p.y),
            color(p.class)
        );
    }
    legend(&mut out, classes);
    out.push_str("</svg>\n");
    out
}

/// A labelled series of `(x, y, error bar half-height)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64, f64)>,
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let a = Axes::fit(pts().map(|p| p.0), pts().flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let mut out = String::new();
    frame(&mut out, &a, title, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        let path: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", a.px(p.0), a.py(p.1))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y, e) in &s.points {
            let (xp, lo, hi) = (a.px(x), a.py(y - e), a.py(y + e));
            if e > 0.0 {
                let _ = writeln!(out, r#"<line x1="{xp:.2}" y1="{lo:.2}" x2="{xp:.2}" y2="{hi:.2}" stroke="{c}"/>"#);
                let _ = writeln!(out, r#"<line x1="{:.2}" y1="{lo:.2}" x2="{:.2}" y2="{lo:.2}" stroke="{c}"/>"#, xp - 3.0, xp + 3.0);
                let _ = writeln!(out, r#"<line x1="{:.2}" y1="{hi:.2}" x2="{:.2}" y2="{hi:.2}" stroke="{c}"/>"#, xp - 3.0, xp + 3.0);
            }
            let _ = writeln!(out, r#"<circle cx="{xp:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, a.py(y));
        }
    }
    legend(&mut out, &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_parse_as_xml() {
        let s = scatter(
            "gt <r/g, b/g>",
            "r/g",
            "b/g",
            &[ScatterPoint { x: 0.5, y: 0.7, class: 0 }, ScatterPoint { x: 0.9, y: 0.3, class: 1 }],
            &["warm & low".into(), "cold".into()],
        );
        roxmltree::Document::parse(&s).unwrap();
        let l = line_chart(
            "median",
            "n_test",
            "degrees",
            &[Series {
                label: "lslr".into(),
                points: vec![(0.0, 5.0, 0.5), (1.0, 3.0, 0.2)],
            }],
        );
        let doc = roxmltree::Document::parse(&l).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 1);
    }

    #[test]
    fn empty_and_flat_inputs_stay_finite() {
        let s = scatter("t", "x", "y", &[], &[]);
        assert!(!s.contains("NaN") && !s.contains("inf"));
        let l = line_chart("t", "x", "y", &[Series { label: "a".into(), points: vec![(1.0, 2.0, 0.0)] }]);
        assert!(!l.contains("NaN"));
    }
}
