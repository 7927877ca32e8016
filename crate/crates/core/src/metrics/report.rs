use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a metric came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub run_id: String,
    pub seed: u64,
    pub extractor: Option<String>,
    pub sample_counts: BTreeMap<String, usize>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub fid: Option<f64>,
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    pub cas: Option<f64>,
    pub provenance: Provenance,
}

/// Appends one JSON record as a line.
pub fn append_jsonl(path: &Path, record: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Tiles `(N, H, W, 3)` images in `[0, 1]` into a grid with 1px gaps.
pub fn save_image_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let (n, h, w, c) = images.dims4()?;
    if n == 0 || c != 3 || cols == 0 {
        return Err(Error::invalid("grid needs a non-empty RGB batch and cols > 0"));
    }
    let rows = n.div_ceil(cols);
    let data = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::from_pixel((cols * (w + 1) + 1) as u32, (rows * (h + 1) + 1) as u32, Rgb([255, 255, 255]));
    for i in 0..n {
        let (gx, gy) = (i % cols * (w + 1) + 1, i / cols * (h + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let o = ((i * h + y) * w + x) * 3;
                let px = |k: usize| (data[o + k].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((gx + x) as u32, (gy + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    img.save(path)?;
    Ok(())
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

/// Renders a polyline of `(x, y)` points with axes, e.g. FID against guidance scale.
pub fn save_line_plot(points: &[(f64, f64)], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("plot points"));
    }
    let (w, h, m) = (480i64, 320i64, 30i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| points.iter().map(sel).fold(init, f);
    let (xmin, xmax) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (ymin, ymax) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    let span = |a: f64, b: f64| if (b - a).abs() < 1e-12 { 1.0 } else { b - a };
    let to_px = |(x, y): (f64, f64)| {
        (
            m + ((x - xmin) / span(xmin, xmax) * (w - 2 * m) as f64).round() as i64,
            h - m - ((y - ymin) / span(ymin, ymax) * (h - 2 * m) as f64).round() as i64,
        )
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (m, h - m), (w - m, h - m), axis);
    draw_line(&mut img, (m, m), (m, h - m), axis);
    let ink = Rgb([200, 40, 40]);
    for pair in points.windows(2) {
        draw_line(&mut img, to_px(pair[0]), to_px(pair[1]), ink);
    }
    for &p in points {
        let (x, y) = to_px(p);
        for d in -2..=2 {
            draw_line(&mut img, (x - 2, y + d), (x + 2, y + d), ink);
        }
    }
    img.save(path)?;
    Ok(())
}
