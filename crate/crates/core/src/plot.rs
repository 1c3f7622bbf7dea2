//! Static charts: line curves and grouped bars, as PNG rasters and SVG.
//!
//! The PNG output carries no text; the SVG twin has titles, axis ranges and
//! legends.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn range(series: &[Series], from_zero: bool) -> (f64, f64) {
    let vals = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if from_zero {
        lo = lo.min(0.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    (lo, hi)
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        (H - MARGIN) as f64 - t * (H - 2 * MARGIN) as f64
    }
}

fn x_at(i: usize, n: usize) -> f64 {
    let span = (W - 2 * MARGIN) as f64;
    MARGIN as f64 + if n > 1 { span * i as f64 / (n - 1) as f64 } else { span / 2.0 }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

fn axes(img: &mut RgbImage) {
    let k = [0, 0, 0];
    let (l, r, t, b) = (MARGIN as f64, (W - MARGIN) as f64, MARGIN as f64, (H - MARGIN) as f64);
    draw_line(img, (l, t), (l, b), k);
    draw_line(img, (l, b), (r, b), k);
}

fn blank() -> RgbImage {
    RgbImage::from_pixel(W, H, Rgb([255, 255, 255]))
}

fn svg_open(title: &str, lo: f64, hi: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#, l - 4, t + 4);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#, l - 4, b);
    s
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 4 + 14 * i as u32;
        let c = hex(PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, W - MARGIN - 110, y);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - MARGIN - 96, y + 9, escape(l));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write_svg(path: &Path, mut s: String) -> Result<()> {
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Curves over a shared x axis, written to `<stem>.png` and `<stem>.svg`.
pub fn line_chart(dir: &Path, stem: &str, title: &str, series: &[Series]) -> Result<()> {
    let (lo, hi) = range(series, false);
    let f = Frame { lo, hi };
    let mut img = blank();
    axes(&mut img);
    let mut svg = svg_open(title, lo, hi);
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let n = s.values.len();
        let pts: Vec<(f64, f64)> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (x_at(i, n), f.y(v)))
            .collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], c);
        }
        let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#, d.join(" "), hex(c));
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut svg, &labels);
    img.save(dir.join(format!("{stem}.png")))?;
    write_svg(&dir.join(format!("{stem}.svg")), svg)
}

/// One group of bars per category, one bar per series.
pub fn bar_chart(dir: &Path, stem: &str, title: &str, categories: &[String], series: &[Series]) -> Result<()> {
    if series.iter().any(|s| s.values.len() != categories.len()) {
        return Err(Error::Input("every series needs one value per category".into()));
    }
    let (lo, hi) = range(series, true);
    let f = Frame { lo, hi };
    let mut img = blank();
    axes(&mut img);
    let mut svg = svg_open(title, lo, hi);
    let groups = categories.len().max(1);
    let group_w = (W - 2 * MARGIN) as f64 / groups as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let x0 = MARGIN as f64 + g as f64 * group_w + group_w * 0.1;
        for (k, s) in series.iter().enumerate() {
            let c = PALETTE[k % PALETTE.len()];
            let v = s.values[g];
            let (top, base) = (f.y(v.max(lo)), f.y(0.0f64.max(lo)));
            let (y0, y1) = (top.min(base), top.max(base));
            let x = x0 + k as f64 * bar_w;
            for px in x as u32..(x + bar_w - 1.0).max(x + 1.0) as u32 {
                for py in y0 as u32..=y1 as u32 {
                    if px < W && py < H {
                        img.put_pixel(px, py, Rgb(c));
                    }
                }
            }
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                (bar_w - 1.0).max(1.0),
                y1 - y0,
                hex(c)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + group_w * 0.4,
            H - MARGIN + 14,
            escape(cat)
        );
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut svg, &labels);
    img.save(dir.join(format!("{stem}.png")))?;
    write_svg(&dir.join(format!("{stem}.svg")), svg)
}
