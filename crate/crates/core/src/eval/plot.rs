//! Accuracy against bits-per-pixel, one polyline per method. Both renderers
//! take only the parsed CSV rows.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{CurveRow, Method};
use crate::error::Result;
use crate::imaging::{Rgb, RgbImage};

const WIDTH: usize = 640;
const HEIGHT: usize = 420;
const MARGIN: [usize; 4] = [60, 20, 20, 50]; // left, right, top, bottom

fn color(m: Method) -> [u8; 3] {
    match m {
        Method::Identity => [90, 90, 90],
        Method::MedianCut => [31, 119, 180],
        Method::MedianCutDither => [23, 190, 207],
        Method::Octree => [148, 103, 189],
        Method::ColorCnn => [255, 127, 14],
        Method::ColorCnnPlus => [214, 39, 40],
        Method::Jpeg => [44, 160, 44],
    }
}

/// Successful points per method, sorted by bpp.
fn series(rows: &[CurveRow]) -> BTreeMap<&'static str, (Method, Vec<(f64, f64)>)> {
    let mut out: BTreeMap<&'static str, (Method, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in rows {
        if let (Some(acc), Some(bpp)) = (r.accuracy, r.bpp) {
            out.entry(r.method.as_str())
                .or_insert_with(|| (r.method, Vec::new()))
                .1
                .push((bpp, acc));
        }
    }
    for (_, pts) in out.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

struct Frame {
    x_max: f64,
}

impl Frame {
    fn new(rows: &[CurveRow]) -> Self {
        let x_max = rows.iter().filter_map(|r| r.bpp).fold(0.0f64, f64::max);
        Self {
            x_max: if x_max > 0.0 { x_max * 1.05 } else { 1.0 },
        }
    }

    fn map(&self, bpp: f64, acc: f64) -> (f64, f64) {
        let [l, r, t, b] = MARGIN.map(|v| v as f64);
        let x = l + bpp / self.x_max * (WIDTH as f64 - l - r);
        let y = HEIGHT as f64 - b - acc.clamp(0.0, 100.0) / 100.0 * (HEIGHT as f64 - t - b);
        (x, y)
    }
}

pub fn render_curve_svg(rows: &[CurveRow]) -> String {
    let frame = Frame::new(rows);
    let [l, r, t, b] = MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0) = (l, HEIGHT - b);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} V{y0} H{}" stroke="black" fill="none"/>"#,
        WIDTH - r
    );
    for tick in (0..=100).step_by(20) {
        let (_, y) = frame.map(0.0, tick as f64);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{tick}</text>"#, x0 - 6, y + 4.0);
    }
    for i in 0..=4 {
        let v = frame.x_max * i as f64 / 4.0;
        let (x, _) = frame.map(v, 0.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.2}</text>"#, y0 + 16);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">bits per pixel</text>"#,
        (l + WIDTH - r) / 2,
        HEIGHT - 10
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">accuracy (%)</text>"#,
        HEIGHT / 2,
        HEIGHT / 2
    );
    for (row, (name, (method, pts))) in series(rows).into_iter().enumerate() {
        let [cr, cg, cb] = color(method);
        let stroke = format!("rgb({cr},{cg},{cb})");
        let path: Vec<String> = pts
            .iter()
            .map(|&(bpp, acc)| {
                let (x, y) = frame.map(bpp, acc);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{stroke}" stroke-width="2" fill="none"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').expect("x,y");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{stroke}"/>"#);
        }
        let ly = t + 14 + row * 16;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{stroke}" text-anchor="end">{name}</text>"#,
            WIDTH - r - 4
        );
    }
    s.push_str("</svg>\n");
    s
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set_pixel(x as usize, y as usize, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb, thick: i64) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        let (x, y) = ((x0 + f * (x1 - x0)).round() as i64, (y0 + f * (y1 - y0)).round() as i64);
        for dy in -thick..=thick {
            for dx in -thick..=thick {
                put(img, x + dx, y + dy, c);
            }
        }
    }
}

/// Raster version without text: axes, 20-point gridlines and one colored
/// polyline per method.
pub fn render_curve_png(rows: &[CurveRow]) -> Result<RgbImage> {
    let frame = Frame::new(rows);
    let mut img = RgbImage::filled(WIDTH, HEIGHT, [1.0, 1.0, 1.0]);
    let grid = [0.88f32; 3];
    for tick in (20..=100).step_by(20) {
        let (xa, y) = frame.map(0.0, tick as f64);
        let (xb, _) = frame.map(frame.x_max, tick as f64);
        line(&mut img, (xa, y), (xb, y), grid, 0);
    }
    let origin = frame.map(0.0, 0.0);
    line(&mut img, origin, frame.map(frame.x_max, 0.0), [0.0; 3], 0);
    line(&mut img, origin, frame.map(0.0, 100.0), [0.0; 3], 0);
    for (_, (method, pts)) in series(rows) {
        let c = color(method).map(|v| f32::from(v) / 255.0);
        let mapped: Vec<(f64, f64)> = pts.iter().map(|&(b, a)| frame.map(b, a)).collect();
        for w in mapped.windows(2) {
            line(&mut img, w[0], w[1], c, 1);
        }
        for &p in &mapped {
            line(&mut img, p, p, c, 3);
        }
    }
    Ok(img)
}
