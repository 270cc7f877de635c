//! Tile corpus: slide slicing, the tissue filter, manifests and the
//! synthetic two-domain generator.

mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

use crate::color::{srgb_to_cielab, unit_from_cielab, LabImage, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{build_manifest, read_slide_dir, CorpusManifest, DomainCounts, PrepareConfig, TileEntry, MANIFEST_VERSION};
pub use synth::{render_synthetic_tile, synth_corpus, synth_tiles};

pub const ENTROPY_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "P63")]
    P63,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::He, Domain::P63];

    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::He => "HE",
            Domain::P63 => "P63",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HE" => Ok(Domain::He),
            "P63" => Ok(Domain::P63),
            _ => Err(Error::Validation(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlideImage {
    pub pixels: RgbImage,
    pub slide_id: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub pixels: LabImage,
    pub slide_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub domain: Domain,
}

impl Tile {
    pub fn size(&self) -> usize {
        self.pixels.width
    }

    /// Square, three channels, every value inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let p = &self.pixels;
        if p.width != p.height || p.width == 0 {
            return Err(Error::Shape(format!("tile must be square, got {}×{}", p.width, p.height)));
        }
        if p.data.len() != p.width * p.height * 3 {
            return Err(Error::Shape("tile must have exactly 3 channels".into()));
        }
        if let Some(v) = p.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("tile value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Planar `3×S×S` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s = self.size();
        Tensor::from_vec(&[3, s, s], self.pixels.to_planar()).expect("validated tile")
    }
}

/// Cuts a slide into a grid of `tile_px` squares (partial edge tiles are
/// dropped), box-filters each to `out_px` and converts it to unit LAB.
pub fn slice_slide(slide: &SlideImage, tile_px: usize, out_px: usize) -> Result<Vec<Tile>> {
    let img = &slide.pixels;
    if img.channels != 3 {
        return Err(Error::Shape(format!("slides need 3 channels, got {}", img.channels)));
    }
    if tile_px == 0 || out_px == 0 || !tile_px.is_multiple_of(out_px) {
        return Err(Error::Validation(format!(
            "tile size {tile_px} must be a positive multiple of output size {out_px}"
        )));
    }
    let factor = tile_px / out_px;
    let area = (factor * factor) as f64;
    let (rows, cols) = (img.height / tile_px, img.width / tile_px);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = Vec::with_capacity(out_px * out_px * 3);
            for oy in 0..out_px {
                for ox in 0..out_px {
                    let mut acc = [0.0f64; 3];
                    for dy in 0..factor {
                        let y = r * tile_px + oy * factor + dy;
                        for dx in 0..factor {
                            let x = c * tile_px + ox * factor + dx;
                            let p = img.pixel(x, y);
                            for k in 0..3 {
                                acc[k] += p[k] as f64;
                            }
                        }
                    }
                    data.extend(unit_from_cielab(srgb_to_cielab(acc.map(|v| v / area))));
                }
            }
            tiles.push(Tile {
                pixels: LabImage::new(out_px, out_px, data)?,
                slide_id: slide.slide_id.clone(),
                grid_row: r,
                grid_col: c,
                domain: slide.domain,
            });
        }
    }
    Ok(tiles)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// Largest accepted share of background pixels.
    pub tau_bg: f64,
    /// Unit lightness above which a pixel counts as background.
    pub l_white: f64,
    /// Minimum lightness-histogram entropy, in bits.
    pub tau_ent: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            tau_bg: 0.80,
            l_white: 0.90,
            tau_ent: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueFilterReport {
    pub background_fraction: f64,
    pub entropy_bits: f64,
    pub accepted: bool,
}

/// Shannon entropy (bits) of the lightness channel over 64 equal bins.
pub fn lightness_entropy(img: &LabImage) -> f64 {
    let mut hist = [0usize; ENTROPY_BINS];
    let mut n = 0usize;
    for l in img.lightness() {
        let bin = ((l.clamp(0.0, 1.0) * ENTROPY_BINS as f32) as usize).min(ENTROPY_BINS - 1);
        hist[bin] += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let total = n as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn tissue_filter(tile: &Tile, t: &FilterThresholds) -> TissueFilterReport {
    let img = &tile.pixels;
    let n = img.width * img.height;
    let background = img.lightness().filter(|&l| l as f64 > t.l_white).count();
    let background_fraction = if n == 0 { 1.0 } else { background as f64 / n as f64 };
    let entropy_bits = lightness_entropy(img);
    TissueFilterReport {
        background_fraction,
        entropy_bits,
        accepted: background_fraction <= t.tau_bg && entropy_bits >= t.tau_ent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn uniform_tile(size: usize, lab: [f32; 3]) -> Tile {
        Tile {
            pixels: LabImage::new(size, size, lab.repeat(size * size)).unwrap(),
            slide_id: "t".into(),
            grid_row: 0,
            grid_col: 0,
            domain: Domain::He,
        }
    }

    fn slide(w: usize, h: usize) -> SlideImage {
        SlideImage {
            pixels: RgbImage::new(w, h, 3, vec![128; w * h * 3]).unwrap(),
            slide_id: "s".into(),
            domain: Domain::P63,
        }
    }

    #[test]
    fn slice_counts() {
        let tiles = slice_slide(&slide(4096, 4096), 1024, 256).unwrap();
        assert_eq!(tiles.len(), 16);
        assert!(tiles.iter().all(|t| t.pixels.width == 256 && t.pixels.height == 256));
        assert_eq!(slice_slide(&slide(1024, 1023), 1024, 256).unwrap().len(), 0);
        // 3000 wide × 5000 tall: floor(5000/1024)=4 rows, floor(3000/1024)=2 cols
        let tiles = slice_slide(&slide(3000, 5000), 1024, 256).unwrap();
        assert_eq!(tiles.len(), 8);
        assert_eq!((tiles[7].grid_row, tiles[7].grid_col), (3, 1));
    }

    #[test]
    fn slice_uses_area_averaging() {
        // 2×2 checkerboard of black/white collapses to the mean level 127.5
        let mut data = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                let v = if (x + y) % 2 == 0 { 0 } else { 255 };
                data.extend([v, v, v]);
            }
        }
        let s = SlideImage {
            pixels: RgbImage::new(2, 2, 3, data).unwrap(),
            slide_id: "c".into(),
            domain: Domain::He,
        };
        let t = slice_slide(&s, 2, 1).unwrap();
        let want = unit_from_cielab(srgb_to_cielab([127.5; 3]));
        assert_eq!(t[0].pixels.pixel(0, 0), want);
        assert!(slice_slide(&s, 3, 2).is_err());
    }

    #[test]
    fn filter_rejects_background_and_constant_tiles() {
        let n = 128.0 / 255.0;
        let white = tissue_filter(&uniform_tile(32, [1.0, n, n]), &FilterThresholds::default());
        assert_eq!(white.background_fraction, 1.0);
        assert_eq!(white.entropy_bits, 0.0);
        assert!(!white.accepted);
        let gray = tissue_filter(&uniform_tile(32, [0.5, n, n]), &FilterThresholds::default());
        assert_eq!(gray.background_fraction, 0.0);
        assert_eq!(gray.entropy_bits, 0.0);
        assert!(!gray.accepted);
    }

    #[test]
    fn filter_accepts_uniform_noise_near_six_bits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let size = 256;
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend([rng.random::<f32>(), 0.5, 0.5]);
        }
        let tile = Tile {
            pixels: LabImage::new(size, size, data).unwrap(),
            ..uniform_tile(1, [0.0; 3])
        };
        // Oracle: histogram entropy computed independently from the L values.
        let mut counts = [0f64; 64];
        for l in tile.pixels.lightness() {
            counts[((l * 64.0).floor() as usize).min(63)] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let oracle: f64 = counts
            .iter()
            .filter(|c| **c > 0.0)
            .map(|c| -(c / total) * (c / total).log2())
            .sum();
        let r = tissue_filter(&tile, &FilterThresholds::default());
        assert!((r.entropy_bits - oracle).abs() < 1e-12);
        assert!((r.entropy_bits - 6.0).abs() < 0.01, "{}", r.entropy_bits);
        assert!(r.accepted);
        assert_eq!(r, tissue_filter(&tile, &FilterThresholds::default()));
    }

    #[test]
    fn tile_validation() {
        let mut t = uniform_tile(4, [0.5; 3]);
        assert!(t.validate().is_ok());
        t.pixels.data[5] = 1.5;
        assert!(t.validate().is_err());
        let rect = Tile {
            pixels: LabImage::new(4, 2, vec![0.5; 24]).unwrap(),
            ..uniform_tile(1, [0.0; 3])
        };
        assert!(rect.validate().is_err());
    }
}
