//! Procedural two-domain tiles. Both domains draw tissue layouts from the
//! same distribution but through independent random streams, so the corpus
//! is unpaired; only the palettes differ.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::CorpusManifest;
use super::{tissue_filter, Domain, FilterThresholds, Tile};
use crate::color::{rgb_to_lab, RgbImage};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: u64 = 32;
const PIXEL_NOISE: f64 = 5.0;

struct Palette {
    stroma: [f64; 3],
    stroma_dark: [f64; 3],
    lumen: [f64; 3],
    nucleus: [f64; 3],
    marked: [f64; 3],
}

const HE: Palette = Palette {
    stroma: [236.0, 172.0, 204.0],
    stroma_dark: [200.0, 118.0, 168.0],
    lumen: [246.0, 238.0, 244.0],
    nucleus: [92.0, 56.0, 142.0],
    marked: [78.0, 46.0, 130.0],
};

const P63: Palette = Palette {
    stroma: [222.0, 222.0, 232.0],
    stroma_dark: [176.0, 184.0, 212.0],
    lumen: [247.0, 247.0, 249.0],
    nucleus: [98.0, 110.0, 172.0],
    marked: [128.0, 82.0, 44.0],
};

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    marked: bool,
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, size: f64, r_lo: f64, r_hi: f64) -> Blob {
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        Blob {
            cx: rng.random_range(0.0..size),
            cy: rng.random_range(0.0..size),
            rx: rng.random_range(r_lo..r_hi) * size,
            ry: rng.random_range(r_lo..r_hi) * size,
            cos: angle.cos(),
            sin: angle.sin(),
            marked: rng.random_bool(0.4),
        }
    }

    /// Soft coverage in `[0, 1]`, one pixel of antialiasing at the rim.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let r = (u * u + v * v).sqrt();
        let rim = 1.0 / self.rx.min(self.ry).max(1.0);
        ((1.0 - r) / rim + 0.5).clamp(0.0, 1.0)
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Renders one synthetic tile from a domain-specific stream. Every call with
/// the same arguments returns the same pixels.
pub fn render_synthetic_tile(domain: Domain, size: usize, seed: u64, index: u64, attempt: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match domain {
        Domain::He => 0u64,
        Domain::P63 => 1u64,
    };
    rng.set_stream((lane << 48) | (index << 8) | attempt);
    let s = size as f64;
    let tau = std::f64::consts::TAU;
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            kx: rng.random_range(-4.0..4.0) * tau / s,
            ky: rng.random_range(-4.0..4.0) * tau / s,
            phase: rng.random_range(0.0..tau),
        })
        .collect();
    let lumens: Vec<Blob> = (0..rng.random_range(0..=2)).map(|_| Blob::sample(&mut rng, s, 0.10, 0.25)).collect();
    let nuclei: Vec<Blob> = (0..rng.random_range(12..=28)).map(|_| Blob::sample(&mut rng, s, 0.025, 0.06)).collect();
    let pal = match domain {
        Domain::He => &HE,
        Domain::P63 => &P63,
    };
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive sigma");
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = waves.iter().map(|w| (w.kx * fx + w.ky * fy + w.phase).sin()).sum::<f64>() / 6.0 + 0.5;
            let mut c = mix(pal.stroma, pal.stroma_dark, t.clamp(0.0, 1.0));
            for l in &lumens {
                c = mix(c, pal.lumen, l.coverage(fx, fy));
            }
            for n in &nuclei {
                let target = if n.marked { pal.marked } else { pal.nucleus };
                c = mix(c, target, n.coverage(fx, fy));
            }
            for v in c {
                data.push((v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(size, size, 3, data).expect("sized buffer")
}

fn synth_tile(domain: Domain, size: usize, seed: u64, index: u64) -> Result<Tile> {
    let thresholds = FilterThresholds::default();
    for attempt in 0..MAX_ATTEMPTS {
        let rgb = render_synthetic_tile(domain, size, seed, index, attempt);
        let tile = Tile {
            pixels: rgb_to_lab(&rgb)?,
            slide_id: format!("synth{index:05}"),
            grid_row: 0,
            grid_col: 0,
            domain,
        };
        if tissue_filter(&tile, &thresholds).accepted {
            return Ok(tile);
        }
    }
    Err(Error::Corpus(format!(
        "synthetic {} tile {index} failed the tissue filter {MAX_ATTEMPTS} times",
        domain.as_str()
    )))
}

/// `n` tiles per domain, in memory.
pub fn synth_tiles(n: usize, size: usize, seed: u64) -> Result<(Vec<Tile>, Vec<Tile>)> {
    if size < 8 {
        return Err(Error::Validation(format!("synthetic tiles need at least 8 px, got {size}")));
    }
    let make = |d| (0..n as u64).map(|i| synth_tile(d, size, seed, i)).collect::<Result<Vec<_>>>();
    Ok((make(Domain::He)?, make(Domain::P63)?))
}

/// Writes a synthetic corpus with its manifest under `out_dir`.
pub fn synth_corpus(out_dir: &Path, n: usize, size: usize, seed: u64) -> Result<CorpusManifest> {
    let (he, p63) = synth_tiles(n, size, seed)?;
    let mut m = CorpusManifest::empty(out_dir.to_path_buf(), seed, size);
    for tile in he.iter().chain(&p63) {
        m.count_slide(tile.domain, 1);
        m.push_tile(tile)?;
    }
    m.write()?;
    Ok(m)
}
