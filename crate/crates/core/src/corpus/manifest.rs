use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{slice_slide, tissue_filter, Domain, FilterThresholds, SlideImage, Tile};
use crate::error::{Error, Result};
use crate::imageio;

pub const MANIFEST_FORMAT: &str = "stainedit-corpus";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub he: usize,
    pub p63: usize,
}

impl DomainCounts {
    pub fn get(&self, d: Domain) -> usize {
        match d {
            Domain::He => self.he,
            Domain::P63 => self.p63,
        }
    }

    fn bump(&mut self, d: Domain) {
        match d {
            Domain::He => self.he += 1,
            Domain::P63 => self.p63 += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    tile_px: usize,
    thresholds: FilterThresholds,
    slides: DomainCounts,
    tiles_seen: DomainCounts,
    tiles_kept: DomainCounts,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileEntry {
    /// Relative to the manifest directory.
    pub path: String,
    pub domain: Domain,
    pub slide_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub tile_px: usize,
    pub thresholds: FilterThresholds,
    pub slides: DomainCounts,
    pub tiles_seen: DomainCounts,
    pub tiles_kept: DomainCounts,
    pub tiles: Vec<TileEntry>,
}

#[derive(Clone, Debug)]
pub struct PrepareConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub thresholds: FilterThresholds,
    pub slice_px: usize,
    pub tile_px: usize,
}

impl PrepareConfig {
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        PrepareConfig {
            out_dir: out_dir.into(),
            seed,
            thresholds: FilterThresholds::default(),
            slice_px: 1024,
            tile_px: 256,
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub(crate) fn tile_path(domain: Domain, slide_id: &str, row: usize, col: usize) -> String {
    format!("tiles/{}/{}_r{row:03}_c{col:03}.png", domain.as_str(), sanitize(slide_id))
}

/// Slices, filters and stores every slide, then writes `manifest.jsonl`.
pub fn build_manifest(slides: &[SlideImage], cfg: &PrepareConfig) -> Result<CorpusManifest> {
    let mut sorted: Vec<&SlideImage> = slides.iter().collect();
    sorted.sort_by(|a, b| (a.domain, &a.slide_id).cmp(&(b.domain, &b.slide_id)));
    for w in sorted.windows(2) {
        if w[0].domain == w[1].domain && sanitize(&w[0].slide_id) == sanitize(&w[1].slide_id) {
            return Err(Error::Corpus(format!("duplicate slide id `{}`", w[0].slide_id)));
        }
    }
    let mut m = CorpusManifest {
        root: cfg.out_dir.clone(),
        seed: cfg.seed,
        tile_px: cfg.tile_px,
        thresholds: cfg.thresholds,
        slides: DomainCounts::default(),
        tiles_seen: DomainCounts::default(),
        tiles_kept: DomainCounts::default(),
        tiles: Vec::new(),
    };
    for slide in sorted {
        m.slides.bump(slide.domain);
        for tile in slice_slide(slide, cfg.slice_px, cfg.tile_px)? {
            m.tiles_seen.bump(tile.domain);
            if !tissue_filter(&tile, &cfg.thresholds).accepted {
                continue;
            }
            m.push_tile(&tile)?;
        }
    }
    for d in Domain::ALL {
        if m.tiles_kept.get(d) == 0 {
            return Err(Error::Corpus(format!(
                "no {} tiles survived the tissue filter ({} slides, {} tiles seen)",
                d.as_str(),
                m.slides.get(d),
                m.tiles_seen.get(d)
            )));
        }
    }
    m.write()?;
    Ok(m)
}

impl CorpusManifest {
    pub(crate) fn empty(root: PathBuf, seed: u64, tile_px: usize) -> Self {
        CorpusManifest {
            root,
            seed,
            tile_px,
            thresholds: FilterThresholds::default(),
            slides: DomainCounts::default(),
            tiles_seen: DomainCounts::default(),
            tiles_kept: DomainCounts::default(),
            tiles: Vec::new(),
        }
    }

    pub(crate) fn push_tile(&mut self, tile: &Tile) -> Result<()> {
        let rel = tile_path(tile.domain, &tile.slide_id, tile.grid_row, tile.grid_col);
        imageio::write(&self.root.join(&rel), &imageio::encode_lab(&tile.pixels)?)?;
        self.tiles_kept.bump(tile.domain);
        self.tiles.push(TileEntry {
            path: rel,
            domain: tile.domain,
            slide_id: tile.slide_id.clone(),
            grid_row: tile.grid_row,
            grid_col: tile.grid_col,
        });
        Ok(())
    }

    pub(crate) fn count_slide(&mut self, d: Domain, tiles: usize) {
        self.slides.bump(d);
        for _ in 0..tiles {
            self.tiles_seen.bump(d);
        }
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    fn header(&self) -> Header {
        Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            seed: self.seed,
            tile_px: self.tile_px,
            thresholds: self.thresholds,
            slides: self.slides,
            tiles_seen: self.tiles_seen,
            tiles_kept: self.tiles_kept,
        }
    }

    pub fn write(&self) -> Result<()> {
        let path = self.path();
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(&path, e));
        line(serde_json::to_string(&self.header()).expect("header serializes"))?;
        for t in &self.tiles {
            line(serde_json::to_string(t).expect("entry serializes"))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Accepts either the manifest file or the directory containing it.
    pub fn load(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |n: usize, e: &dyn std::fmt::Display| Error::Corpus(format!("{}:{n}: {e}", file_path.display()));
        let first = lines
            .next()
            .ok_or_else(|| Error::Corpus(format!("{} is empty", file_path.display())))?
            .map_err(|e| Error::io(&file_path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
        if header.format != MANIFEST_FORMAT {
            return Err(bad(1, &format!("unknown format `{}`", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut tiles = Vec::new();
        let mut kept = DomainCounts::default();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TileEntry = serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?;
            kept.bump(entry.domain);
            tiles.push(entry);
        }
        if kept != header.tiles_kept {
            return Err(Error::Corpus(format!(
                "header lists {:?} tiles but the manifest holds {:?}",
                header.tiles_kept, kept
            )));
        }
        Ok(CorpusManifest {
            root,
            seed: header.seed,
            tile_px: header.tile_px,
            thresholds: header.thresholds,
            slides: header.slides,
            tiles_seen: header.tiles_seen,
            tiles_kept: header.tiles_kept,
            tiles,
        })
    }

    pub fn entries(&self, d: Domain) -> impl Iterator<Item = &TileEntry> {
        self.tiles.iter().filter(move |t| t.domain == d)
    }

    pub fn load_tile(&self, entry: &TileEntry) -> Result<Tile> {
        let path = self.root.join(&entry.path);
        let pixels = match imageio::read(&path)? {
            imageio::Decoded::Lab(l) => l,
            imageio::Decoded::Rgb(_) => {
                return Err(Error::Corpus(format!("{} is not a LAB tile", path.display())))
            }
        };
        let tile = Tile {
            pixels,
            slide_id: entry.slide_id.clone(),
            grid_row: entry.grid_row,
            grid_col: entry.grid_col,
            domain: entry.domain,
        };
        tile.validate()?;
        if tile.size() != self.tile_px {
            return Err(Error::Corpus(format!(
                "{} is {} px, manifest says {}",
                path.display(),
                tile.size(),
                self.tile_px
            )));
        }
        Ok(tile)
    }

    /// Loads every tile of one domain, in manifest order.
    pub fn load_domain(&self, d: Domain) -> Result<Vec<Tile>> {
        self.entries(d).map(|e| self.load_tile(e)).collect()
    }
}

/// Reads `<dir>/HE/*.png` and `<dir>/P63/*.png` (directory names are
/// matched case-insensitively); the file stem becomes the slide id.
pub fn read_slide_dir(dir: &Path) -> Result<Vec<SlideImage>> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut slides = Vec::new();
    let mut seen = Vec::new();
    for ent in listing {
        let ent = ent.map_err(|e| Error::io(dir, e))?;
        let name = ent.file_name().to_string_lossy().into_owned();
        let Ok(domain) = name.parse::<Domain>() else { continue };
        if !ent.path().is_dir() {
            continue;
        }
        seen.push(domain);
        let sub = ent.path();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)
            .map_err(|e| Error::io(&sub, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let pixels = match imageio::read(&f)? {
                imageio::Decoded::Rgb(r) => r,
                imageio::Decoded::Lab(_) => {
                    return Err(Error::Corpus(format!("{} is 16-bit; slides must be 8-bit", f.display())))
                }
            };
            let slide_id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            slides.push(SlideImage { pixels, slide_id, domain });
        }
    }
    for d in Domain::ALL {
        if !seen.contains(&d) {
            return Err(Error::Corpus(format!("{} has no `{}` directory", dir.display(), d.as_str())));
        }
    }
    Ok(slides)
}
