//! PNG artifacts: side-by-side frame panels and box plots.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{validation, Result};
use crate::metrics::quantile;

fn io_err(e: image::ImageError) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Panels placed left to right with a shared grey scale over
/// `[lo, hi]`, each scaled up by `zoom` (nearest neighbour).
pub fn write_panels(path: &Path, panels: &[ArrayView2<f64>], lo: f64, hi: f64, zoom: usize) -> Result<()> {
    let Some(first) = panels.first() else {
        return Err(validation("no panels to draw"));
    };
    let (h, w) = first.dim();
    if panels.iter().any(|p| p.dim() != (h, w)) {
        return Err(validation("panels differ in shape"));
    }
    let gap = 4;
    let zoom = zoom.max(1);
    let width = panels.len() * w * zoom + (panels.len() - 1) * gap;
    let mut img = GrayImage::from_pixel(width as u32, (h * zoom) as u32, Luma([255]));
    let span = (hi - lo).max(f64::EPSILON);
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w * zoom + gap);
        for ((y, x), &v) in p.indexed_iter() {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            for dy in 0..zoom {
                for dx in 0..zoom {
                    img.put_pixel((x0 + x * zoom + dx) as u32, (y * zoom + dy) as u32, Luma([g]));
                }
            }
        }
    }
    img.save(path).map_err(io_err)
}

/// One box (quartiles, whiskers at min/max, median line) per group, on a
/// shared vertical axis.
pub fn write_box_plot(path: &Path, groups: &[(String, Vec<f64>)]) -> Result<()> {
    let values: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).filter(|v| v.is_finite()).collect();
    if values.is_empty() {
        return Err(validation("box plot has no finite values"));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let (bw, gap, h, pad) = (24u32, 16u32, 240u32, 10u32);
    let width = pad * 2 + groups.len() as u32 * (bw + gap);
    let mut img = RgbImage::from_pixel(width, h + 2 * pad, Rgb([255, 255, 255]));
    let ypix = |v: f64| pad + ((hi - v) / span * h as f64).round().clamp(0.0, h as f64) as u32;
    let black = Rgb([0, 0, 0]);
    let hline = |img: &mut RgbImage, x0: u32, x1: u32, y: u32, c: Rgb<u8>| {
        for x in x0..=x1 {
            img.put_pixel(x, y, c);
        }
    };
    let vline = |img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: Rgb<u8>| {
        for y in y0.min(y1)..=y0.max(y1) {
            img.put_pixel(x, y, c);
        }
    };
    for (i, (_, v)) in groups.iter().enumerate() {
        let v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        let x0 = pad + i as u32 * (bw + gap) + gap / 2;
        let x1 = x0 + bw;
        let xm = x0 + bw / 2;
        let [mn, q1, med, q3, mx] = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&v, q));
        let shade = Rgb([170, 190, 230]);
        for y in ypix(q3)..=ypix(q1) {
            hline(&mut img, x0, x1, y, shade);
        }
        vline(&mut img, xm, ypix(mx), ypix(q3), black);
        vline(&mut img, xm, ypix(q1), ypix(mn), black);
        hline(&mut img, x0 + 6, x1 - 6, ypix(mx), black);
        hline(&mut img, x0 + 6, x1 - 6, ypix(mn), black);
        hline(&mut img, x0, x1, ypix(med), Rgb([200, 30, 30]));
        vline(&mut img, x0, ypix(q3), ypix(q1), black);
        vline(&mut img, x1, ypix(q3), ypix(q1), black);
    }
    img.save(path).map_err(io_err)
}
