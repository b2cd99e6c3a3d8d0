//! Minimal raster plots: line charts for loss curves and a labelled scatter
//! for the score-versus-token-count balance plot. Axis ranges are printed in a
//! 3x5 pixel font; series are told apart by color (see [`PALETTE`]).

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 36;

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Self { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        let my = 0.05 * (y1 - y0);
        Self { x0, x1, y0: y0 - my, y1: y1 + my }
    }

    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (W - 2 * MARGIN) as f64;
        let h = (H - 2 * MARGIN) as f64;
        let u = MARGIN as f64 + (x - self.x0) / (self.x1 - self.x0) * w;
        let v = (H - MARGIN) as f64 - (y - self.y0) / (self.y1 - self.y0) * h;
        (u.round() as i64, v.round() as i64)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn dot(img: &mut RgbImage, (x, y): (i64, i64), c: [u8; 3]) {
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx, y + dy, c);
        }
    }
}

fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str) {
    for (k, ch) in s.chars().enumerate() {
        if let Some(rows) = glyph(ch) {
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..3 {
                    if bits & (4 >> c) != 0 {
                        put(img, x + 4 * k as i64 + c, y + r as i64, [0, 0, 0]);
                    }
                }
            }
        }
    }
}

fn fmt(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn canvas(frame: &Frame) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = [0, 0, 0];
    line(&mut img, (MARGIN as i64, (H - MARGIN) as i64), ((W - MARGIN) as i64, (H - MARGIN) as i64), axis);
    line(&mut img, (MARGIN as i64, MARGIN as i64), (MARGIN as i64, (H - MARGIN) as i64), axis);
    text(&mut img, MARGIN as i64, (H - MARGIN + 6) as i64, &fmt(frame.x0));
    let xs = fmt(frame.x1);
    text(&mut img, (W - MARGIN) as i64 - 4 * xs.len() as i64, (H - MARGIN + 6) as i64, &xs);
    text(&mut img, 2, (H - MARGIN - 5) as i64, &fmt(frame.y0));
    text(&mut img, 2, MARGIN as i64, &fmt(frame.y1));
    img
}

/// One polyline per series, colors from [`PALETTE`] in order.
pub fn line_plot(path: &Path, series: &[Series]) -> Result<()> {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut img = canvas(&frame);
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| frame.px(x, y)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        if pts.len() == 1 {
            dot(&mut img, pts[0], c);
        }
        // legend swatch
        let ly = 6 + 8 * k as i64;
        for dx in 0..12 {
            put(&mut img, (W - MARGIN) as i64 - 12 + dx, ly, c);
        }
    }
    img.save(path)?;
    Ok(())
}

/// One marker per series (its first point), colors from [`PALETTE`].
pub fn scatter_plot(path: &Path, series: &[Series]) -> Result<()> {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut img = canvas(&frame);
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for &(x, y) in s.points.iter().filter(|p| p.1.is_finite()) {
            dot(&mut img, frame.px(x, y), c);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Images tiled row-major, `cols` per row, scaled up by `zoom`.
pub fn image_grid(path: &Path, images: &crate::toy_data::ImageBatch, cols: usize, zoom: u32) -> Result<()> {
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols).max(1);
    let s = images.size as u32;
    let mut img = RgbImage::from_pixel(cols as u32 * s * zoom, rows as u32 * s * zoom, Rgb([0, 0, 0]));
    for i in 0..images.len() {
        let tile = images.to_rgb8(i);
        let (gx, gy) = ((i % cols) as u32 * s * zoom, (i / cols) as u32 * s * zoom);
        for (x, y, p) in tile.enumerate_pixels() {
            for dy in 0..zoom {
                for dx in 0..zoom {
                    img.put_pixel(gx + x * zoom + dx, gy + y * zoom + dy, *p);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
