//! Filter-bank perceptual distance.
//!
//! At scales 1, 2 and 4 each image is box-downsampled and every pixel gets a
//! nine-dimensional descriptor (per channel: 3x3 local mean and central
//! differences in x and y), normalized to unit length. The distance is the
//! mean squared descriptor difference over valid pixels, averaged across
//! scales. With a mask, a descriptor counts only when its full support lies
//! inside the mask, so pixels outside cannot leak into the score.

use image::RgbImage;

use super::mask::Mask;
use crate::error::{PicError, Result};

pub const SCALES: [usize; 3] = [1, 2, 4];

struct Plane {
    w: usize,
    h: usize,
    /// `[channel][y * w + x]`, values in `[0, 1]`.
    c: [Vec<f64>; 3],
}

fn downsample(img: &RgbImage, s: usize) -> Plane {
    let (w, h) = (img.width() as usize / s, img.height() as usize / s);
    let mut c = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    let norm = 1.0 / (255.0 * (s * s) as f64);
    for y in 0..h {
        for x in 0..w {
            for dy in 0..s {
                for dx in 0..s {
                    let p = img.get_pixel((x * s + dx) as u32, (y * s + dy) as u32);
                    for k in 0..3 {
                        c[k][y * w + x] += p[k] as f64 * norm;
                    }
                }
            }
        }
    }
    Plane { w, h, c }
}

fn descriptor(p: &Plane, x: usize, y: usize) -> [f64; 9] {
    let at = |k: usize, x: usize, y: usize| p.c[k][y * p.w + x];
    let mut f = [0.0; 9];
    for k in 0..3 {
        let mut m = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                m += at(k, x + dx - 1, y + dy - 1);
            }
        }
        f[3 * k] = m / 9.0;
        f[3 * k + 1] = 0.5 * (at(k, x + 1, y) - at(k, x - 1, y));
        f[3 * k + 2] = 0.5 * (at(k, x, y + 1) - at(k, x, y - 1));
    }
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
    f.map(|v| v / n)
}

/// Mean over scales of the masked descriptor distance. `None` when no pixel
/// at any scale has its full support inside the mask.
pub fn perceptual_distance(
    a: &RgbImage,
    b: &RgbImage,
    valid: Option<&Mask>,
) -> Result<Option<f64>> {
    if a.dimensions() != b.dimensions() {
        return Err(PicError::Validation(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    if let Some(m) = valid {
        if (m.width(), m.height()) != (w, h) {
            return Err(PicError::Validation(
                "mask size differs from image size".into(),
            ));
        }
    }
    let full = Mask::new(w, h, true);
    let valid = valid.unwrap_or(&full);
    let mut total = 0.0;
    let mut used = 0usize;
    for s in SCALES {
        if w / s < 3 || h / s < 3 {
            continue;
        }
        let pa = downsample(a, s);
        let pb = downsample(b, s);
        let m = valid.pool_all(s).erode(1);
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 1..pa.h - 1 {
            for x in 1..pa.w - 1 {
                if !m.get(x, y) {
                    continue;
                }
                let fa = descriptor(&pa, x, y);
                let fb = descriptor(&pb, x, y);
                sum += fa
                    .iter()
                    .zip(&fb)
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>();
                n += 1;
            }
        }
        if n > 0 {
            total += sum / n as f64;
            used += 1;
        }
    }
    Ok((used > 0).then(|| total / used as f64))
}
