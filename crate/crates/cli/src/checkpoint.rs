//! Model checkpoints.
//!
//! Layout, all integers little-endian, strings as u16 length + UTF-8:
//!
//! | field | encoding |
//! |-------|----------|
//! | magic | `CVCK` |
//! | version | u16 (1) |
//! | latent_channels, control_channels, width, text_dim, ff_mult, control_branches | u64 each |
//! | out_gain | f64 |
//! | adapter count | u32 |
//! | per adapter | target string, scale f64 |
//! | tensor count | u32 |
//! | per tensor | name string, dtype u8, rank u8, dims u64 × rank, row-major f64 payload |
//!
//! Tensors appear in parameter order (base weights, then each adapter's
//! `A` and `B`), so equal parameters always serialize to equal bytes.

use std::fs;
use std::path::Path;

use controlvideo::model::{ModelConfig, ModelParams};
use controlvideo::Tensor;

use crate::error::{CliError, Result};
use crate::tensorfile::{put_string, put_tensor, Reader};

pub const MAGIC: [u8; 4] = *b"CVCK";
pub const VERSION: u16 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.latent_channels, c.control_channels, c.width, c.text_dim, c.ff_mult, c.control_branches] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.out_gain.to_le_bytes());
    let adapters = params.lora_adapters();
    out.extend_from_slice(&(adapters.len() as u32).to_le_bytes());
    for a in adapters {
        put_string(&mut out, &a.target);
        out.extend_from_slice(&a.scale.to_le_bytes());
    }
    let count = params.iter().count();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in params.iter() {
        put_string(&mut out, &p.name);
        put_tensor(&mut out, p.tensor.shape(), p.tensor.data());
    }
    out
}

/// Named tensors plus the header, without rebuilding the model.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub config: ModelConfig,
    pub lora: Vec<(String, f64)>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode_raw(buf: &[u8]) -> std::result::Result<RawCheckpoint, String> {
    let mut r = Reader::new(buf);
    if r.bytes(4)? != MAGIC {
        return Err("bad magic, not a checkpoint".into());
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut dim = || -> std::result::Result<usize, String> { usize::try_from(r.u64()?).map_err(|e| e.to_string()) };
    let (latent_channels, control_channels, width, text_dim, ff_mult, control_branches) = (dim()?, dim()?, dim()?, dim()?, dim()?, dim()?);
    let config = ModelConfig {
        latent_channels,
        control_channels,
        width,
        text_dim,
        ff_mult,
        control_branches,
        out_gain: r.f64()?,
    };
    let mut lora = Vec::new();
    for _ in 0..r.u32()? {
        lora.push((r.string()?, r.f64()?));
    }
    let mut tensors = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let (dims, data) = r.tensor()?;
        let t = Tensor::from_vec(&dims, data).map_err(|e| e.to_string())?;
        tensors.push((name, t));
    }
    r.finish()?;
    Ok(RawCheckpoint { config, lora, tensors })
}

pub fn decode(buf: &[u8]) -> std::result::Result<ModelParams, String> {
    let raw = decode_raw(buf)?;
    ModelParams::restore(raw.config, raw.tensors, &raw.lora).map_err(|e| e.to_string())
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(CliError::io(path))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path).map_err(CliError::io(path))?;
    decode(&buf).map_err(|d| CliError::format(path, d))
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    let buf = fs::read(path).map_err(CliError::io(path))?;
    decode_raw(&buf).map_err(|d| CliError::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use controlvideo::model::{attach_lora, LoraTargets};

    fn small() -> ModelConfig {
        ModelConfig {
            width: 8,
            text_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let p = ModelParams::new(small(), 3).unwrap();
        let p = attach_lora(&p, &LoraTargets::MainAttention, 2, 0.5, 1).unwrap();
        let bytes = encode(&p);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = encode(&ModelParams::new(small(), 9).unwrap());
        let b = encode(&ModelParams::new(small(), 9).unwrap());
        let c = encode(&ModelParams::new(small(), 10).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn truncated_or_foreign_files_fail() {
        let bytes = encode(&ModelParams::new(small(), 3).unwrap());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&crate::tensorfile::encode(&[1], &[0.0])).is_err());
    }
}
