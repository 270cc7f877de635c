//! Structural similarity between 8-bit images: Gaussian window (σ = 1.5,
//! 11 taps), evaluated only where the window fits, averaged over channels.

use crate::color::{lab_to_rgb, LabImage, RgbImage};
use crate::corpus::Tile;
use crate::error::{Error, Result};
use crate::netcore::Generator;

const SIGMA: f64 = 1.5;
const RADIUS: usize = 5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const RANGE: f64 = 255.0;

fn window() -> [f64; 2 * RADIUS + 1] {
    let mut w = [0.0; 2 * RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of one plane.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = window();
    let n = 2 * RADIUS + 1;
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::Shape(format!(
            "SSIM needs equal shapes, got {}×{}×{} and {}×{}×{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let n = 2 * RADIUS + 1;
    if a.width < n || a.height < n {
        return Err(Error::Shape(format!("SSIM needs images of at least {n}×{n}")));
    }
    let (c1, c2) = ((K1 * RANGE).powi(2), (K2 * RANGE).powi(2));
    let (w, h, ch) = (a.width, a.height, a.channels);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (mu_a, mu_b) = (blur(&pa, w, h), blur(&pb, w, h));
        let (aa, bb, ab) = (blur(&prod(&pa, &pa), w, h), blur(&prod(&pb, &pb), w, h), blur(&prod(&pa, &pb), w, h));
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / ch as f64)
}

/// SSIM between each tile and its round trip through `forward` then
/// `backward`, compared in sRGB.
pub fn cycle_ssim(forward: &Generator<f32>, backward: &Generator<f32>, tiles: &[Tile]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tiles.len());
    for tile in tiles {
        let s = tile.size();
        let x = tile.to_tensor().reshape(&[1, 3, s, s])?;
        let fake = forward.generate(&x, None, None)?.output;
        let rec = backward.generate(&fake, None, None)?.output;
        let rec = LabImage::from_planar(s, s, rec.data())?;
        out.push(ssim(&lab_to_rgb(&tile.pixels)?, &lab_to_rgb(&rec)?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> i64) -> RgbImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0, 255) as u8);
                }
            }
        }
        RgbImage::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn matches_reference_implementation() {
        let base = |y: usize, x: usize, c: usize| ((x * 7 + y * 13 + c * 50) % 256) as i64;
        let a = pattern(24, 20, base);
        let b = pattern(24, 20, |y, x, c| base(y, x, c) + ((x * y + c) % 17) as i64 - 8);
        let g = pattern(24, 20, |y, x, c| base(y, x, c) / 2 + 60);
        // skimage structural_similarity(gaussian_weights, σ=1.5, population covariance)
        assert!((ssim(&a, &b).unwrap() - 0.9879203802322941).abs() < 1e-9);
        assert!((ssim(&a, &g).unwrap() - 0.7813454049208698).abs() < 1e-9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = pattern(12, 12, |_, _, _| 0);
        assert!(ssim(&a, &pattern(12, 13, |_, _, _| 0)).is_err());
        assert!(ssim(&pattern(8, 8, |_, _, _| 0), &pattern(8, 8, |_, _, _| 0)).is_err());
    }
}
