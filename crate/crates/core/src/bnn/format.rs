//! `BNNM` model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BNNM" | u32 version = 1 | u32 layer_count
//! per layer:
//!   u32 in_dim | u32 out_dim | u8 has_bn | u8 binarized_output | u16 reserved = 0
//!   out_dim * ceil(in_dim / 64) u64 weight words (bit i of row j = input i, output j)
//!   if has_bn: f32[out_dim] gamma, beta, mu, var, then f32 epsilon
//! u32 provenance_len | provenance (UTF-8)
//! ```

use std::fs;
use std::path::Path;

use super::bits::words_for;
use super::bn::BatchNormParams;
use super::model::{BnnLayer, BnnModel};
use super::PackedBitMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BNNM";
pub const VERSION: u32 = 1;

pub fn encode_model(model: &BnnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.push(layer.bn().is_some() as u8);
        out.push(layer.binarized_output() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for w in layer.weights().words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(bn) = layer.bn() {
            for arr in [&bn.gamma, &bn.beta, &bn.mu, &bn.var] {
                for v in arr.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.extend_from_slice(&bn.epsilon.to_le_bytes());
        }
    }
    let text = model.provenance().as_bytes();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn flag(v: u8, layer: usize, what: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Format(format!("layer {layer}: {what} byte is {other}"))),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<BnnModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("missing BNNM magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let layer_count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(64));
    for l in 0..layer_count {
        let in_dim = r.u32("in_dim")? as usize;
        let out_dim = r.u32("out_dim")? as usize;
        let has_bn = flag(r.u8("has_bn")?, l, "has_bn")?;
        let binarized = flag(r.u8("binarized_output")?, l, "binarized_output")?;
        if r.u16("reserved")? != 0 {
            return Err(Error::Format(format!("layer {l}: reserved field is nonzero")));
        }
        let words = words_for(in_dim)
            .checked_mul(out_dim)
            .ok_or_else(|| Error::Format(format!("layer {l}: dimensions overflow")))?;
        let data = r.u64s(words, "weights")?;
        let weights = PackedBitMatrix::from_words_unchecked(in_dim, out_dim, data);
        let bn = if has_bn {
            Some(BatchNormParams {
                gamma: r.f32s(out_dim, "gamma")?,
                beta: r.f32s(out_dim, "beta")?,
                mu: r.f32s(out_dim, "mu")?,
                var: r.f32s(out_dim, "var")?,
                epsilon: r.f32s(1, "epsilon")?[0],
            })
        } else {
            None
        };
        layers.push(BnnLayer::validated(weights, bn, binarized, l)?);
    }
    let text_len = r.u32("provenance length")? as usize;
    let text = r.take(text_len, "provenance")?;
    let provenance = std::str::from_utf8(text)
        .map_err(|e| Error::Format(format!("provenance is not UTF-8: {e}")))?
        .to_string();
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after provenance",
            bytes.len() - r.pos
        )));
    }
    BnnModel::new(layers, provenance)
}

pub fn save_model(model: &BnnModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<BnnModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
