//! Static PNG figures: line charts, grayscale maps, label overlays and mask
//! trajectories. Output bytes depend only on the inputs.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kspace::SamplingMask;
use crate::seg::LabelMap;

/// Distinct series colors, cycled.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn save_gray_image(img: &GrayImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of one or more series sharing axes; x is the sample index.
/// Non-finite points are skipped.
pub fn line_chart(series: &[Vec<f64>], width: u32, height: u32, path: &Path) -> Result<()> {
    let margin = 24i64;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        (0.0, 1.0)
    };
    let (w, h) = (width as i64, height as i64);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), axis);
    draw_line(&mut img, (margin, margin), (margin, h - margin), axis);
    let longest = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let to_px = |i: usize, v: f64| {
        let x = margin + ((w - 2 * margin) as f64 * i as f64 / (longest - 1) as f64).round() as i64;
        let y = h - margin - ((h - 2 * margin) as f64 * (v - lo) / (hi - lo)).round() as i64;
        (x, y)
    };
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = to_px(i, v);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, color);
            }
            prev = Some(p);
        }
    }
    save_rgb(&img, path)
}

fn to_u8(v: f64, max: f64) -> u8 {
    if max > 0.0 {
        (v / max * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Grayscale rendering scaled so `max` maps to white; `max = None` uses the
/// image maximum.
pub fn gray_map(values: &Array2<f32>, max: Option<f64>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let max = max.unwrap_or_else(|| values.iter().map(|&v| v as f64).fold(0.0, f64::max));
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(values[(y as usize, x as usize)] as f64, max)])
    });
    save_gray_image(&img, path)
}

/// `|recon - truth|` as a grayscale map.
pub fn error_map(recon: &Array2<f32>, truth: &Array2<f32>, path: &Path) -> Result<()> {
    if recon.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", recon.dim(), truth.dim())));
    }
    let diff = Array2::from_shape_fn(recon.dim(), |i| (recon[i] - truth[i]).abs());
    gray_map(&diff, None, path)
}

/// Image in gray with foreground labels tinted: truth only green, prediction
/// only red, agreement yellow.
pub fn overlay(image: &Array2<f32>, pred: &LabelMap, truth: &LabelMap, path: &Path) -> Result<()> {
    if image.dim() != pred.dim() || pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch("overlay inputs differ in shape".into()));
    }
    let (h, w) = image.dim();
    let max = image.iter().map(|&v| v as f64).fold(0.0, f64::max);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize, x as usize);
        let g = to_u8(image[i] as f64, max);
        let blend = |c: [u8; 3]| Rgb([(g / 2).saturating_add(c[0] / 2), (g / 2).saturating_add(c[1] / 2), (g / 2).saturating_add(c[2] / 2)]);
        match (pred[i] > 0, truth[i] > 0) {
            (true, true) => blend([255, 255, 0]),
            (true, false) => blend([255, 0, 0]),
            (false, true) => blend([0, 255, 0]),
            (false, false) => Rgb([g, g, g]),
        }
    });
    save_rgb(&img, path)
}

/// Sampled k-space lines in white on black, `height` rows tall.
pub fn mask_image(mask: &SamplingMask, height: usize, path: &Path) -> Result<()> {
    let grid = mask.to_grid(height);
    let img = GrayImage::from_fn(mask.width() as u32, height as u32, |x, y| {
        Luma([if grid[(y as usize, x as usize)] > 0 { 255 } else { 0 }])
    });
    save_gray_image(&img, path)
}
