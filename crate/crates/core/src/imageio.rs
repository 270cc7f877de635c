//! PNG encoding for slides, tiles and service payloads.
//!
//! Two on-disk conventions are used:
//! * 8-bit RGB PNGs hold ordinary sRGB images (slides, previews, outputs);
//! * 16-bit RGB PNGs hold LAB tiles, each channel storing the unit-scaled LAB
//!   value quantised to `u16`.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::color::{LabImage, RgbImage};
use crate::error::{Error, Result};

/// A decoded PNG, either an sRGB image or a LAB tile.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoded {
    Rgb(RgbImage),
    Lab(LabImage),
}

fn codec(e: impl std::fmt::Display) -> Error {
    Error::Codec(e.to_string())
}

fn encode(width: usize, height: usize, depth: BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(ColorType::Rgb);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(codec)?;
        writer.write_image_data(data).map_err(codec)?;
        writer.finish().map_err(codec)?;
    }
    Ok(out)
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    encode(img.width, img.height, BitDepth::Eight, &img.data)
}

pub fn encode_lab(img: &LabImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    encode(img.width, img.height, BitDepth::Sixteen, &bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(codec)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Codec("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(codec)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::Codec("unexpanded palette image".into())),
    };
    match info.bit_depth {
        BitDepth::Eight => {
            let mut data = Vec::with_capacity(w * h * 3);
            for px in buf.chunks_exact(channels) {
                match channels {
                    1 | 2 => data.extend_from_slice(&[px[0]; 3]),
                    _ => data.extend_from_slice(&px[..3]),
                }
            }
            Ok(Decoded::Rgb(RgbImage::new(w, h, 3, data)?))
        }
        BitDepth::Sixteen if channels == 3 => {
            let data = buf
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
                .collect();
            Ok(Decoded::Lab(LabImage::new(w, h, data)?))
        }
        other => Err(Error::Codec(format!(
            "unsupported PNG layout: {channels} channel(s) at {other:?}"
        ))),
    }
}

pub fn read(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads any supported PNG as a unit-LAB image; sRGB images are converted.
pub fn read_as_lab(path: &Path) -> Result<LabImage> {
    decode_as_lab(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn decode_as_lab(bytes: &[u8]) -> Result<LabImage> {
    match decode(bytes)? {
        Decoded::Lab(l) => Ok(l),
        Decoded::Rgb(r) => crate::color::rgb_to_lab(&r),
    }
}
