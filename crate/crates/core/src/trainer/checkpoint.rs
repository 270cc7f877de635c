//! Binary checkpoints: magic, format version, a JSON header describing the
//! configuration and tensor layout, raw little-endian `f32` payload, and a
//! sha256 trailer over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::netcore::NetConfig;
use crate::objectives::LossWeights;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STNEDIT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    train: TrainConfig,
    weights: LossWeights,
    step: u64,
    adam_steps: [u64; 4],
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

const NETS: [&str; 4] = ["he2p63", "p632he", "disc_he", "disc_p63"];

fn layout(st: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let m = &st.models;
    let sets = [m.he2p63.params(), m.p632he.params(), m.disc_he.params(), m.disc_p63.params()];
    let mut out = Vec::new();
    for (net, set) in NETS.iter().zip(sets) {
        for (name, t) in set.names().iter().zip(set.tensors()) {
            out.push((format!("{net}/{name}"), t));
        }
    }
    for (net, opt) in NETS.iter().zip(&st.optimizers) {
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for (i, t) in moments.iter().enumerate() {
                out.push((format!("adam.{net}.{kind}{i}"), t));
            }
        }
    }
    out
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = layout(self);
        let header = Header {
            net: self.net.clone(),
            train: self.train.clone(),
            weights: self.weights,
            step: self.step,
            adam_steps: [0, 1, 2, 3].map(|i| self.optimizers[i].t),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(integrity("not a checkpoint (bad magic or too short)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("checksum mismatch (truncated or corrupted file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| integrity("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| integrity(format!("bad header: {e}")))?;
        let mut st = TrainState::new(header.net, header.train, header.weights)?;
        st.step = header.step;
        let expected: Vec<TensorInfo> = layout(&st)
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if expected != header.tensors {
            return Err(integrity("tensor layout does not match the stored configuration"));
        }
        let mut data = &body[20 + hlen..];
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if data.len() < n * 4 {
                return Err(integrity("payload shorter than the header declares"));
            }
            let (chunk, rest) = data.split_at(n * 4);
            data = rest;
            let vals = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(shape, vals)
        };
        let mut nets: Vec<Vec<Tensor<f32>>> = Vec::new();
        for set in st.models.param_sets() {
            nets.push(set.iter().map(|t| read(t.shape())).collect::<Result<_>>()?);
        }
        let mut opts = Vec::new();
        for (i, opt) in st.optimizers.iter().enumerate() {
            let m = opt.m.iter().map(|t| read(t.shape())).collect::<Result<Vec<_>>>()?;
            let v = opt.v.iter().map(|t| read(t.shape())).collect::<Result<Vec<_>>>()?;
            opts.push(Adam {
                t: header.adam_steps[i],
                m,
                v,
            });
        }
        if !data.is_empty() {
            return Err(integrity(format!("{} trailing payload bytes", data.len())));
        }
        let mut nets = nets.into_iter();
        let mdl = &mut st.models;
        mdl.he2p63.params_mut().load(nets.next().unwrap())?;
        mdl.p632he.params_mut().load(nets.next().unwrap())?;
        mdl.disc_he.params_mut().load(nets.next().unwrap())?;
        mdl.disc_p63.params_mut().load(nets.next().unwrap())?;
        st.optimizers = opts.try_into().map_err(|_| integrity("optimizer count"))?;
        Ok(st)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_state;
    use super::super::{train_step, TileCorpus};
    use super::*;
    use crate::corpus::synth_tiles;

    fn trained() -> TrainState {
        let (he, p63) = synth_tiles(4, 16, 1).unwrap();
        let c = TileCorpus::from_tiles(&he, &p63).unwrap();
        let mut st = tiny_state(8);
        train_step(&mut st, &c.batch(8, 1, 2).unwrap()).unwrap();
        st
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let st = trained();
        let bytes = st.to_bytes();
        let back = TrainState::from_bytes(&bytes).unwrap();
        assert!(back.same_weights(&st));
        assert_eq!(back.step, 1);
        assert_eq!(back.train, st.train);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = trained().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 30] {
            assert!(matches!(TrainState::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(TrainState::from_bytes(&flipped), Err(Error::Integrity(_))));
        let mut newer = bytes.clone();
        newer[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            TrainState::from_bytes(&newer),
            Err(Error::Version { found: 7, expected: 1 })
        ));
        assert!(matches!(TrainState::from_bytes(b"garbage"), Err(Error::Integrity(_))));
    }
}
