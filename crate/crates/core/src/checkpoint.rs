//! Binary containers for tensors and model checkpoints.
//!
//! Tensor blob: `b"GKTENSR\0"`, u32 format version, u32 rank, u64 dims,
//! then the f64 values, all little-endian.
//!
//! Checkpoint: `b"GKCKPT\0\0"`, u32 format version, u64 header length, a
//! JSON header (split, loss weights, and the architecture of every part),
//! then each parameter tensor of each part in order as u64 length followed
//! by f64 values. Values are stored as raw bits, so loading reproduces them
//! exactly.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, Shape3};
use crate::losses::{LossTerms, LossWeights};
use crate::model_graph::{Block, BlockChain, BlockSpec, GraftedModel, SplitSpec};

pub const FORMAT_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 8] = b"GKTENSR\0";
const CKPT_MAGIC: &[u8; 8] = b"GKCKPT\0\0";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format {
            path: String::new(),
            reason: format!("not a {what} (bad magic)"),
        });
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            path: String::new(),
            reason: format!("unsupported {what} version {version}"),
        });
    }
    Ok(())
}

pub fn tensor_to_bytes(t: &ArrayD<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.ndim() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let mut r = Cursor::new(bytes);
    check_magic(&mut r, TENSOR_MAGIC, "tensor blob")?;
    let rank = read_u32(&mut r)? as usize;
    let dims = (0..rank)
        .map(|_| read_u64(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let data = read_f64s(&mut r, n)?;
    if r.position() as usize != bytes.len() {
        return Err(Error::Format {
            path: String::new(),
            reason: "trailing bytes after tensor".into(),
        });
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims"))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.display().to_string(),
            reason,
        },
        e => e,
    }
}

pub fn write_tensor_blob(path: &Path, t: &ArrayD<f64>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor_blob(path: &Path) -> Result<ArrayD<f64>> {
    tensor_from_bytes(&fs::read(path)?).map_err(|e| with_path(e, path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PartHeader {
    name: String,
    input: Shape3,
    blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    split: Option<SplitSpec>,
    loss_weights: Option<LossWeights>,
    loss_terms: Option<LossTerms>,
    parts: Vec<PartHeader>,
}

/// Named model parts plus the grafting settings they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub split: Option<SplitSpec>,
    pub loss_weights: Option<LossWeights>,
    pub loss_terms: Option<LossTerms>,
    pub parts: Vec<(String, BlockChain)>,
}

impl Checkpoint {
    /// A single pretrained chain stored under the part name `model`.
    pub fn model(chain: &BlockChain) -> Self {
        Self {
            split: None,
            loss_weights: None,
            loss_terms: None,
            parts: vec![("model".into(), chain.clone())],
        }
    }

    /// A grafted model stored as parts `gn_front`, `mid` and `last`.
    pub fn grafted(model: &GraftedModel, split: SplitSpec, weights: LossWeights, terms: LossTerms) -> Self {
        Self {
            split: Some(split),
            loss_weights: Some(weights),
            loss_terms: Some(terms),
            parts: vec![
                ("gn_front".into(), model.gn_front.clone()),
                ("mid".into(), model.mid().clone()),
                ("last".into(), model.last().clone()),
            ],
        }
    }

    pub fn part(&self, name: &str) -> Option<&BlockChain> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            split: self.split,
            loss_weights: self.loss_weights,
            loss_terms: self.loss_terms,
            parts: self
                .parts
                .iter()
                .map(|(name, chain)| PartHeader {
                    name: name.clone(),
                    input: chain.input_shape(),
                    blocks: chain.specs(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, chain) in &self.parts {
            for p in chain.params() {
                out.extend_from_slice(&(p.len() as u64).to_le_bytes());
                write_f64s(&mut out, p)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        check_magic(&mut r, CKPT_MAGIC, "checkpoint")?;
        let len = read_u64(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut parts = Vec::with_capacity(header.parts.len());
        for part in header.parts {
            let mut blocks = Vec::with_capacity(part.blocks.len());
            for b in part.blocks {
                let mut layers = Vec::with_capacity(b.layers.len());
                for spec in b.layers {
                    let has_params = spec.param_count() > 0;
                    let (weight, bias) = if has_params {
                        let nw = read_u64(&mut r)? as usize;
                        let w = read_f64s(&mut r, nw)?;
                        let nb = read_u64(&mut r)? as usize;
                        (w, read_f64s(&mut r, nb)?)
                    } else {
                        (Vec::new(), Vec::new())
                    };
                    layers.push(Layer::from_parts(spec, weight, bias)?);
                }
                blocks.push(Block::new(b.name, layers));
            }
            parts.push((part.name, BlockChain::new(part.input, blocks)?));
        }
        if r.position() as usize != bytes.len() {
            return Err(Error::Format {
                path: String::new(),
                reason: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            split: header.split,
            loss_weights: header.loss_weights,
            loss_terms: header.loss_terms,
            parts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| with_path(e, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_graph::{graft, lenet5, split, LENET_DEFAULT_SPLIT};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn grafted_checkpoint_round_trips_bit_exactly() {
        let chain = lenet5(1, 3);
        let parts = split(&chain, LENET_DEFAULT_SPLIT).unwrap();
        let gn = crate::model_graph::build_grafted_frontend(&parts.front, 3, 8).unwrap();
        let model = graft(gn, Arc::new(parts.mid), Arc::new(parts.last)).unwrap();
        let ckpt = Checkpoint::grafted(&model, LENET_DEFAULT_SPLIT, LossWeights::default(), LossTerms::ALL);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.part("gn_front").unwrap().input_shape(), Shape3::new(3, 28, 28));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = Checkpoint::model(&lenet5(1, 0)).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    proptest! {
        #[test]
        fn tensor_blob_round_trip(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap();
            let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.iter().zip(t.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
