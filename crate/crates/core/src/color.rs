//! sRGB ↔ CIELAB (D65) conversion with LAB rescaled to the unit cube:
//! `(L/100, (a+128)/255, (b+128)/255)`.

use crate::error::{Error, Result};

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];
const DELTA: f64 = 6.0 / 29.0;

/// Interleaved 8-bit image, `height × width × channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Interleaved unit-scaled LAB image, `height × width × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}×{height}×3 LAB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(LabImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Iterator over the lightness channel.
    pub fn lightness(&self) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().step_by(3).copied()
    }

    /// Planar `3×H×W` copy, the layout the networks consume.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<Self> {
        let hw = width * height;
        if planar.len() != 3 * hw {
            return Err(Error::Shape(format!(
                "planar buffer of {} values does not hold a 3×{height}×{width} image",
                planar.len()
            )));
        }
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = planar[c * hw + i];
            }
        }
        Ok(LabImage { width, height, data })
    }
}

fn linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn delinearize(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f_lab(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_lab_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// CIELAB `(L, a, b)` of an sRGB colour given on the 0–255 scale (values may
/// be fractional, e.g. after area averaging).
pub fn srgb_to_cielab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| linearize(c / 255.0));
    let xyz: Vec<f64> = RGB_TO_XYZ
        .iter()
        .map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2])
        .collect();
    let f: Vec<f64> = (0..3).map(|i| f_lab(xyz[i] / WHITE[i])).collect();
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// sRGB on the 0–255 scale, unclamped, for a CIELAB colour.
pub fn cielab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * f_lab_inv(fx),
        WHITE[1] * f_lab_inv(fy),
        WHITE[2] * f_lab_inv(fz),
    ];
    XYZ_TO_RGB.map(|row| {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        delinearize(lin.max(0.0)) * 255.0
    })
}

/// Unit-cube encoding, clamped so rounding at the white point stays in range.
pub fn unit_from_cielab(lab: [f64; 3]) -> [f32; 3] {
    [lab[0] / 100.0, (lab[1] + 128.0) / 255.0, (lab[2] + 128.0) / 255.0].map(|v| v.clamp(0.0, 1.0) as f32)
}

pub fn cielab_from_unit(u: [f32; 3]) -> [f64; 3] {
    [
        u[0] as f64 * 100.0,
        u[1] as f64 * 255.0 - 128.0,
        u[2] as f64 * 255.0 - 128.0,
    ]
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "LAB conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| unit_from_cielab(srgb_to_cielab([p[0] as f64, p[1] as f64, p[2] as f64])))
        .collect();
    LabImage::new(img.width, img.height, data)
}

pub fn lab_to_rgb(img: &LabImage) -> Result<RgbImage> {
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| {
            cielab_to_srgb(cielab_from_unit([p[0], p[1], p[2]])).map(|c| c.round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    RgbImage::new(img.width, img.height, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(rgb: [u8; 3]) -> [f32; 3] {
        let lab = rgb_to_lab(&RgbImage::new(1, 1, 3, rgb.to_vec()).unwrap()).unwrap();
        lab.pixel(0, 0)
    }

    #[test]
    fn black_and_white_anchor_the_scale() {
        let neutral = 128.0 / 255.0;
        let b = one([0, 0, 0]);
        assert_eq!(b[0], 0.0);
        assert!((b[1] - neutral).abs() < 1e-4 && (b[2] - neutral).abs() < 1e-4);
        let w = one([255, 255, 255]);
        assert!((w[0] - 1.0).abs() < 1e-4);
        assert!((w[1] - neutral).abs() < 1e-4 && (w[2] - neutral).abs() < 1e-4);
    }

    #[test]
    fn mid_gray_matches_reference_colorimetry() {
        // scikit-image rgb2lab([119,119,119]/255) -> L = 50.0344388
        let g = one([119, 119, 119]);
        assert!((g[0] as f64 - 0.500344388).abs() < 1e-4, "{}", g[0]);
        let neutral = 128.0 / 255.0;
        assert!((g[1] - neutral).abs() < 1e-4 && (g[2] - neutral).abs() < 1e-4);
        // scikit-image rgb2lab([200,100,50]/255) -> (53.6295, 36.3052, 45.3805)
        let lab = srgb_to_cielab([200.0, 100.0, 50.0]);
        for (got, want) in lab.iter().zip([53.6295080, 36.3051642, 45.3804719]) {
            assert!((got - want).abs() < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn inverse_edge_cases() {
        let neutral = 128.0 / 255.0;
        let gray = lab_to_rgb(&LabImage::new(1, 1, vec![0.5, neutral, neutral]).unwrap()).unwrap();
        let p = gray.pixel(0, 0);
        assert!(p[0].abs_diff(p[1]) <= 1 && p[1].abs_diff(p[2]) <= 1);
        let black = lab_to_rgb(&LabImage::new(1, 1, vec![0.0, neutral, neutral]).unwrap()).unwrap();
        assert_eq!(black.data, vec![0, 0, 0]);
        // out of gamut values clamp instead of wrapping
        let hot = lab_to_rgb(&LabImage::new(1, 1, vec![1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(hot.data.len(), 3);
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let rgba = RgbImage::new(1, 1, 4, vec![0; 4]).unwrap();
        assert!(matches!(rgb_to_lab(&rgba), Err(Error::Shape(_))));
    }

    #[test]
    fn random_image_round_trip_within_one_level() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
        let data: Vec<u8> = (0..64 * 64 * 3).map(|_| rng.random()).collect();
        let img = RgbImage::new(64, 64, 3, data).unwrap();
        let back = lab_to_rgb(&rgb_to_lab(&img).unwrap()).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!(a.abs_diff(*b) <= 1);
        }
    }

    proptest! {
        #[test]
        fn round_trip_error_at_most_one(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let img = RgbImage::new(1, 1, 3, vec![r, g, b]).unwrap();
            let lab = rgb_to_lab(&img).unwrap();
            prop_assert!(lab.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let back = lab_to_rgb(&lab).unwrap();
            for (x, y) in img.data.iter().zip(&back.data) {
                prop_assert!(x.abs_diff(*y) <= 1);
            }
        }
    }
}
