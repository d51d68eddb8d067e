//! Static SVG charts: histograms and multi-series line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlotData {
    Histogram { label: String, values: Vec<f64>, bins: usize },
    Lines(Vec<Series>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins spanning the data range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() || bins == 0 {
        return Err(Error::InvalidConfig("histogram needs values and at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "histogram".into() });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick label with a bounded number of significant digits.
fn tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs();
    if (1e-3..1e4).contains(&mag) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn axes(out: &mut String, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (y0, y1) = (HEIGHT - MARGIN_BOTTOM, MARGIN_TOP);
    writeln!(out, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##).unwrap();
    writeln!(out, r##"<path d="M{x0:.2} {y1:.2} V{y0:.2} H{x1:.2}" stroke="#000000" fill="none"/>"##).unwrap();
    for k in 0..=4 {
        let fx = frame.x.0 + (frame.x.1 - frame.x.0) * k as f64 / 4.0;
        let fy = frame.y.0 + (frame.y.1 - frame.y.0) * k as f64 / 4.0;
        let (px, py) = (frame.px(fx), frame.py(fy));
        writeln!(out, r##"<path d="M{px:.2} {y0:.2} v5" stroke="#000000"/>"##).unwrap();
        writeln!(out, r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, y0 + 18.0, tick(fx)).unwrap();
        writeln!(out, r##"<path d="M{x0:.2} {py:.2} h-5" stroke="#000000"/>"##).unwrap();
        writeln!(out, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, x0 - 8.0, py + 4.0, tick(fy)).unwrap();
    }
    let cx = (x0 + x1) / 2.0;
    writeln!(out, r#"<text x="{cx:.2}" y="22" font-size="14" text-anchor="middle">{}</text>"#, escape(title)).unwrap();
    writeln!(out, r#"<text x="{cx:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#, HEIGHT - 12.0, escape(x_label)).unwrap();
    let cy = (y0 + y1) / 2.0;
    writeln!(out, r#"<text x="18" y="{cy:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 18 {cy:.2})">{}</text>"#, escape(y_label)).unwrap();
}

fn legend(out: &mut String, labels: &[&str]) {
    let x = WIDTH - MARGIN_RIGHT + 15.0;
    for (k, label) in labels.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 18.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        writeln!(out, r#"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{color}"/>"#, y - 10.0).unwrap();
        writeln!(out, r#"<text x="{:.2}" y="{y:.2}" font-size="11">{}</text>"#, x + 18.0, escape(label)).unwrap();
    }
}

/// Renders a self-contained SVG document.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, data: &PlotData) -> Result<String> {
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    )
    .unwrap();
    match data {
        PlotData::Histogram { label, values, bins } => {
            let h = histogram(values, *bins)?;
            let top = *h.counts.iter().max().expect("non-empty") as f64;
            let frame = Frame::new((h.edges[0], h.edges[h.edges.len() - 1]), (0.0, top));
            axes(&mut out, &frame, title, x_label, y_label);
            for (k, &c) in h.counts.iter().enumerate() {
                let (xa, xb) = (frame.px(h.edges[k]), frame.px(h.edges[k + 1]));
                let (ya, yb) = (frame.py(c as f64), frame.py(0.0));
                writeln!(
                    out,
                    r##"<rect x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="#ffffff" stroke-width="0.5" data-count="{c}"/>"##,
                    (xb - xa).max(0.0),
                    (yb - ya).max(0.0),
                    PALETTE[0]
                )
                .unwrap();
            }
            legend(&mut out, &[label]);
        }
        PlotData::Lines(series) => {
            if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
                return Err(Error::InvalidConfig("line plot needs non-empty series".into()));
            }
            let all = || series.iter().flat_map(|s| s.points.iter());
            if all().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::NonFinite { op: "line plot".into() });
            }
            let range = |f: fn(&(f64, f64)) -> f64| {
                all().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let frame = Frame::new(range(|p| p.0), range(|p| p.1));
            axes(&mut out, &frame, title, x_label, y_label);
            for (k, s) in series.iter().enumerate() {
                let color = PALETTE[k % PALETTE.len()];
                let mut d = String::new();
                for (j, &(x, y)) in s.points.iter().enumerate() {
                    write!(d, "{}{:.2} {:.2}", if j == 0 { "M" } else { " L" }, frame.px(x), frame.py(y)).unwrap();
                }
                writeln!(out, r#"<path d="{d}" stroke="{color}" stroke-width="1.5" fill="none"/>"#).unwrap();
                for &(x, y) in &s.points {
                    writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, frame.px(x), frame.py(y)).unwrap();
                }
            }
            let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
            legend(&mut out, &labels);
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_plot(title: &str, x_label: &str, y_label: &str, data: &PlotData, path: &Path) -> Result<()> {
    let svg = render_svg(title, x_label, y_label, data)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
