//! Minimal standalone SVG line charts.

use std::fmt::Write as _;

use crate::error::{contract, Result};
use crate::evaluation::AdversarialSweep;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dashed: bool,
    pub color: &'a str,
}

/// A shaded region between two curves sharing `x`.
pub struct Band<'a> {
    pub x: &'a [f64],
    pub lo: &'a [f64],
    pub hi: &'a [f64],
}

pub struct Chart<'a> {
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
    pub band: Option<Band<'a>>,
    pub points: Option<(&'a [f64], &'a [f64])>,
    /// Fixed y-range; fitted to the data when `None`.
    pub y_range: Option<(f64, f64)>,
}

fn extent<'b>(values: impl Iterator<Item = &'b f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl Chart<'_> {
    pub fn render(&self) -> Result<String> {
        if self.series.is_empty() || self.series.iter().any(|s| s.x.is_empty()) {
            return Err(contract("cannot plot an empty series"));
        }
        if self.series.iter().any(|s| s.x.len() != s.y.len()) {
            return Err(contract("series x and y lengths differ"));
        }
        let xs = self.series.iter().flat_map(|s| s.x.iter());
        let (x0, x1) = extent(xs);
        let (y0, y1) = self.y_range.unwrap_or_else(|| {
            let mut ys: Vec<f64> = self.series.iter().flat_map(|s| s.y.iter().copied()).collect();
            if let Some(b) = &self.band {
                ys.extend(b.lo.iter().chain(b.hi));
            }
            if let Some((_, py)) = self.points {
                ys.extend(py);
            }
            extent(ys.iter())
        });
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let sy = |y: f64| H - BOTTOM - (y.clamp(y0, y1) - y0) / (y1 - y0) * (H - TOP - BOTTOM);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>"#
        );
        if let Some(b) = &self.band {
            let mut pts: Vec<String> = b.x.iter().zip(b.hi).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            pts.extend(b.x.iter().zip(b.lo).rev().map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))));
            let _ = writeln!(s, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##, pts.join(" "));
        }
        // axes
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}" stroke="black"/>"#,
            b = H - BOTTOM,
            r = W - RIGHT
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>
<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                sx(fx),
                H - BOTTOM + 16.0,
                tick(fx),
                LEFT - 6.0,
                sy(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>
<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 12.0,
            escape(self.x_label),
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(self.y_label)
        );
        if let Some((px, py)) = self.points {
            for (&x, &y) in px.iter().zip(py) {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#, sx(x), sy(y));
            }
        }
        for (k, series) in self.series.iter().enumerate() {
            let pts: Vec<String> = series
                .x
                .iter()
                .zip(series.y)
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let values: Vec<String> = series.x.iter().zip(series.y).map(|(x, y)| format!("{x},{y}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}><desc>{}: {}</desc></polyline>"#,
                pts.join(" "),
                series.color,
                escape(series.label),
                values.join(" ")
            );
            let ly = TOP + 14.0 + 16.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"{dash}/>
<text x="{:.2}" y="{:.2}">{}</text>"#,
                W - RIGHT - 150.0,
                W - RIGHT - 120.0,
                series.color,
                W - RIGHT - 114.0,
                ly + 4.0,
                escape(series.label)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

fn tick(v: f64) -> String {
    let t = format!("{v:.2}");
    t.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy (solid) and mean normalized entropy (dashed) against ε.
pub fn sweep_svg(sweep: &AdversarialSweep) -> Result<String> {
    Chart {
        x_label: "perturbation ε",
        y_label: "accuracy / normalized entropy",
        series: vec![
            Series {
                label: "accuracy",
                x: &sweep.epsilons,
                y: &sweep.accuracy,
                dashed: false,
                color: "#08519c",
            },
            Series {
                label: "entropy",
                x: &sweep.epsilons,
                y: &sweep.entropy,
                dashed: true,
                color: "#a50f15",
            },
        ],
        band: None,
        points: None,
        y_range: Some((0.0, 1.0)),
    }
    .render()
}

/// Predictive mean with a ±2 std band, the true curve dashed and the training points.
pub fn toy_svg(x: &[f64], mean: &[f64], std: &[f64], truth: &[f64], train: (&[f64], &[f64])) -> Result<String> {
    let lo: Vec<f64> = mean.iter().zip(std).map(|(m, s)| m - 2.0 * s).collect();
    let hi: Vec<f64> = mean.iter().zip(std).map(|(m, s)| m + 2.0 * s).collect();
    Chart {
        x_label: "x",
        y_label: "y",
        series: vec![
            Series {
                label: "predictive mean",
                x,
                y: mean,
                dashed: false,
                color: "#08519c",
            },
            Series {
                label: "true function",
                x,
                y: truth,
                dashed: true,
                color: "#444444",
            },
        ],
        band: Some(Band { x, lo: &lo, hi: &hi }),
        points: Some(train),
        y_range: None,
    }
    .render()
}
