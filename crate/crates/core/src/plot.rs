//! Minimal SVG output: sample scatters and metric-vs-iteration charts.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::oracle::OracleSpec;

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 48.0;
pub const INSIDE_COLOR: &str = "#1f5fa8";
/// Infracting samples are drawn in brown.
pub const OUTSIDE_COLOR: &str = "#8b4513";

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        PAD + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, v: f64) -> f64 {
        H - PAD - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = write!(
            out,
            r##"<rect x="{PAD}" y="{PAD}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##,
            w = W - 2.0 * PAD,
            h = H - 2.0 * PAD
        );
        let _ = write!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
        let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 10.0, esc(xlabel));
        let _ = write!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            esc(ylabel)
        );
        for (v, anchor) in [(self.x.0, "start"), (self.x.1, "end")] {
            let _ = write!(
                out,
                r#"<text x="{}" y="{}" text-anchor="{anchor}" font-size="10">{}</text>"#,
                self.px(v),
                H - PAD + 14.0,
                tick(v)
            );
        }
        for v in [self.y.0, self.y.1] {
            let _ = write!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#,
                PAD - 4.0,
                self.py(v) + 3.0,
                tick(v)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open() -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}"><rect width="100%" height="100%" fill="white"/>"#)
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 1.0, c + 1.0);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

/// Scatter of 2-D samples; points the oracle rejects are drawn in
/// [`OUTSIDE_COLOR`]. Returns the SVG text.
pub fn scatter_svg(points: ArrayView2<f64>, oracle: &OracleSpec, title: &str, extent: f64) -> Result<String> {
    if points.ncols() != 2 {
        return Err(Error::Config(format!("scatter plots need 2-D points, got {}", points.ncols())));
    }
    let labels = oracle.evaluate_batch(points)?;
    let frame = Frame {
        x: (-extent, extent),
        y: (-extent, extent),
    };
    let mut out = open();
    frame.axes(&mut out, title, "x0", "x1");
    // inside first so infractions stay visible on top
    for pass in [true, false] {
        let color = if pass { INSIDE_COLOR } else { OUTSIDE_COLOR };
        let _ = write!(out, r#"<g fill="{color}" fill-opacity="0.6">"#);
        for (row, &ok) in points.rows().into_iter().zip(&labels) {
            if ok != pass || !(row[0].abs() <= extent && row[1].abs() <= extent) {
                continue;
            }
            let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, frame.px(row[0]), frame.py(row[1]));
        }
        out.push_str("</g>");
    }
    let bad = labels.iter().filter(|ok| !**ok).count();
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="11" fill="{OUTSIDE_COLOR}">{bad} / {} outside</text>"#,
        W - PAD,
        PAD - 6.0,
        labels.len()
    );
    out.push_str("</svg>");
    Ok(out)
}

/// One named line of `(x, y, stderr)` points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

const PALETTE: [&str; 4] = ["#1f5fa8", "#c0392b", "#27ae60", "#8e44ad"];

/// Line chart with +-1 stderr bars.
pub fn line_svg(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> Result<String> {
    let all: Vec<&(f64, f64, f64)> = series.iter().flat_map(|s| &s.points).collect();
    if all.is_empty() {
        return Err(Error::Config("line chart needs at least one point".into()));
    }
    let xr = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let yr = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1 - p.2), b.max(p.1 + p.2)));
    let frame = Frame {
        x: padded(xr.0, xr.1),
        y: padded(yr.0, yr.1),
    };
    let mut out = open();
    frame.axes(&mut out, title, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", frame.px(p.0), frame.py(p.1)))
            .collect();
        let _ = write!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        for p in &s.points {
            let (x, y) = (frame.px(p.0), frame.py(p.1));
            let _ = write!(
                out,
                r#"<line x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#,
                frame.py(p.1 - p.2),
                frame.py(p.1 + p.2)
            );
        }
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            PAD + 6.0,
            PAD + 14.0 * (k + 1) as f64,
            esc(&s.name)
        );
    }
    out.push_str("</svg>");
    Ok(out)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}
