//! Blind pairwise realism survey packets: each page shows one real and one
//! generated tile in random order, and the answer key lives in a separate file.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PACKET_DIR: &str = "packet";
pub const PACKET_FILE: &str = "packet.json";
pub const KEY_FILE: &str = "answer_key.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: u8,
    pub max: u8,
    pub instructions: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub pair_id: usize,
    /// Paths relative to the packet directory.
    pub left: String,
    pub right: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub pages: Vec<Page>,
    pub rating: RatingScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub pair_id: usize,
    pub real_side: Side,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub seed: u64,
    pub entries: Vec<KeyEntry>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn copy(src: &Path, dst: &Path) -> Result<()> {
    let bytes = std::fs::read(src).map_err(|e| Error::io(src, e))?;
    std::fs::write(dst, bytes).map_err(|e| Error::io(dst, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pairs real and generated tiles that share a file name. Writes
/// `<out>/packet/` (images and `packet.json`) and `<out>/answer_key.json`.
pub fn export_survey_pairs(real_dir: &Path, fake_dir: &Path, n_pairs: usize, seed: u64, out: &Path) -> Result<(Packet, AnswerKey)> {
    let real = png_names(real_dir)?;
    let fake = png_names(fake_dir)?;
    if real.len() != fake.len() {
        return Err(Error::Validation(format!(
            "{} real tiles but {} generated tiles",
            real.len(),
            fake.len()
        )));
    }
    if real != fake {
        return Err(Error::Validation("real and generated tiles must be matched by file name".into()));
    }
    if n_pairs == 0 || n_pairs > real.len() {
        return Err(Error::Validation(format!(
            "cannot draw {n_pairs} pairs from {} matched tiles",
            real.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&String> = real.iter().collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(n_pairs);
    let mut sides: Vec<Side> = (0..n_pairs).map(|i| if i < n_pairs / 2 { Side::Left } else { Side::Right }).collect();
    if n_pairs % 2 == 1 {
        sides[n_pairs - 1] = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
    }
    sides.shuffle(&mut rng);

    let packet_dir = out.join(PACKET_DIR);
    std::fs::create_dir_all(&packet_dir).map_err(|e| Error::io(&packet_dir, e))?;
    let mut pages = Vec::with_capacity(n_pairs);
    let mut entries = Vec::with_capacity(n_pairs);
    for (i, (name, side)) in chosen.iter().zip(&sides).enumerate() {
        let pair_id = i + 1;
        let (left_src, right_src): (PathBuf, PathBuf) = match side {
            Side::Left => (real_dir.join(name), fake_dir.join(name)),
            Side::Right => (fake_dir.join(name), real_dir.join(name)),
        };
        let left = format!("pair_{pair_id:02}_left.png");
        let right = format!("pair_{pair_id:02}_right.png");
        copy(&left_src, &packet_dir.join(&left))?;
        copy(&right_src, &packet_dir.join(&right))?;
        pages.push(Page { pair_id, left, right });
        entries.push(KeyEntry {
            pair_id,
            real_side: *side,
            source: (*name).clone(),
        });
    }
    let packet = Packet {
        pages,
        rating: RatingScale {
            min: 1,
            max: 6,
            instructions: "For each page, choose the image you believe is the real tissue tile, then score the \
                           realism of the other one from 1 (obviously synthetic) to 6 (fully convincing)."
                .into(),
        },
    };
    let key = AnswerKey { seed, entries };
    write_json(&packet_dir.join(PACKET_FILE), &packet)?;
    write_json(&out.join(KEY_FILE), &key)?;
    Ok((packet, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (sub, tag) in [("real", b'R'), ("fake", b'F')] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
            for i in 0..n {
                std::fs::write(dir.path().join(sub).join(format!("t{i:02}.png")), [tag, i as u8]).unwrap();
            }
        }
        dir
    }

    #[test]
    fn key_recovers_the_real_side() {
        let d = fixture(12);
        let out = d.path().join("out");
        let (packet, key) = export_survey_pairs(&d.path().join("real"), &d.path().join("fake"), 8, 3, &out).unwrap();
        assert_eq!(packet.pages.len(), 8);
        assert_eq!(key.entries.len(), 8);
        let lefts = key.entries.iter().filter(|e| e.real_side == Side::Left).count();
        assert_eq!(lefts, 4);
        for (page, entry) in packet.pages.iter().zip(&key.entries) {
            let pick = match entry.real_side {
                Side::Left => &page.left,
                Side::Right => &page.right,
            };
            let bytes = std::fs::read(out.join(PACKET_DIR).join(pick)).unwrap();
            assert_eq!(bytes[0], b'R');
            assert_eq!(bytes, std::fs::read(d.path().join("real").join(&entry.source)).unwrap());
        }
        assert!(!out.join(PACKET_DIR).join(KEY_FILE).exists());
    }

    #[test]
    fn mismatches_are_validation_errors() {
        let d = fixture(4);
        std::fs::remove_file(d.path().join("fake/t03.png")).unwrap();
        let r = export_survey_pairs(&d.path().join("real"), &d.path().join("fake"), 2, 1, &d.path().join("o"));
        assert!(matches!(r, Err(Error::Validation(_))));
        let d = fixture(4);
        let r = export_survey_pairs(&d.path().join("real"), &d.path().join("fake"), 5, 1, &d.path().join("o"));
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
