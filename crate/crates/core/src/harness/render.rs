//! PNG views of fields, feature norms and offsets.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::offsets::OffsetSet;
use crate::trajfield::FieldDump;

fn hsv(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

/// Rows grow upward in the world, so images are flipped vertically.
fn put(img: &mut RgbImage, x0: u32, scale: u32, r: usize, c: usize, h: usize, px: Rgb<u8>) {
    let y = (h - 1 - r) as u32;
    for dy in 0..scale {
        for dx in 0..scale {
            img.put_pixel(x0 + c as u32 * scale + dx, y * scale + dy, px);
        }
    }
}

/// Position in grayscale next to orientation as hue, brightness = position.
pub fn render_field(dump: &FieldDump, scale: u32) -> RgbImage {
    let (h, w) = dump.position.dim();
    let mut img = RgbImage::new(2 * w as u32 * scale, h as u32 * scale);
    for r in 0..h {
        for c in 0..w {
            let p = dump.position[[r, c]] as f64;
            put(&mut img, 0, scale, r, c, h, gray(p));
            let (co, si) = (dump.orientation[[0, r, c]] as f64, dump.orientation[[1, r, c]] as f64);
            let px = if co == 0.0 && si == 0.0 {
                Rgb([0, 0, 0])
            } else {
                hsv(si.atan2(co) / std::f64::consts::TAU, 1.0, p.clamp(0.2, 1.0))
            };
            put(&mut img, w as u32 * scale, scale, r, c, h, px);
        }
    }
    img
}

/// Heat map of a scalar grid normalized by its maximum.
pub fn render_scalar(values: &Array2<f64>, scale: u32) -> RgbImage {
    let (h, w) = values.dim();
    let max = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut img = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for ((r, c), v) in values.indexed_iter() {
        let t = v / max;
        put(&mut img, 0, scale, r, c, h, hsv(0.66 * (1.0 - t), 1.0, t.sqrt().max(0.05)));
    }
    img
}

/// Marks each set's positions (red) and query (white) over a background.
pub fn overlay_offsets(img: &mut RgbImage, sets: &[OffsetSet], h: usize, scale: u32) {
    let mark = |img: &mut RgbImage, r: f64, c: f64, px: Rgb<u8>| {
        let (rr, cc) = (r.round(), c.round());
        if rr < 0.0 || cc < 0.0 || rr as usize >= h || (cc as u32 + 1) * scale > img.width() {
            return;
        }
        let y = (h - 1 - rr as usize) as u32 * scale + scale / 2;
        let x = cc as u32 * scale + scale / 2;
        img.put_pixel(x, y, px);
    };
    for s in sets {
        for p in &s.positions {
            mark(img, p[0], p[1], Rgb([255, 40, 40]));
        }
        mark(img, s.query.0 as f64, s.query.1 as f64, Rgb([255, 255, 255]));
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
