//! Versioned binary weight files (`GMARW001`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "GMARW001"
//! config           7 x u32  image_size, patch_size, embed_dim,
//!                           num_layers, num_heads, mlp_dim, num_classes
//! entry count      u32
//! per entry:       name length u32, UTF-8 name,
//!                  rank u32, rank x dim u32,
//!                  values as f32, row-major
//! ```
//!
//! Values are stored as `f32` even though compute runs in `f64`; the
//! quantization sits far below every test tolerance. Loading validates
//! the magic before anything else, then the config invariants, then
//! every entry's name and shape against the configuration.

use super::super::vit::{ModelParams, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const WEIGHT_MAGIC: &[u8; 8] = b"GMARW001";

pub fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.mlp_dim,
        cfg.num_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated weight file: {what} needs {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(WEIGHT_MAGIC)
        )));
    }
    let mut cfg = [0usize; 7];
    for (i, slot) in cfg.iter_mut().enumerate() {
        *slot = r.u32(&format!("config field {i}"))? as usize;
    }
    let config = ViTConfig {
        image_size: cfg[0],
        patch_size: cfg[1],
        embed_dim: cfg[2],
        num_layers: cfg[3],
        num_heads: cfg[4],
        mlp_dim: cfg[5],
        num_classes: cfg[6],
    };
    config.validate().map_err(|e| Error::format(format!("config block invalid: {e}")))?;

    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for e in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(format!("entry {e} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::format(format!("entry '{name}' has zero dimension {shape:?}")));
        }
        let raw = r.take(numel * 4, &format!("values of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        entries.push((name, Tensor::from_parts(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after last entry at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    ModelParams::from_named(config, entries)
}

pub fn save_weights(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes)
}
