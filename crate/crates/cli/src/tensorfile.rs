//! Raw tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `CVTF` |
//! | 2 | version (1) |
//! | 1 | dtype (1 = f64) |
//! | 1 | rank |
//! | 8 × rank | dims (u64) |
//! | 8 × prod(dims) | row-major f64 payload |

use std::fs;
use std::path::Path;

use controlvideo::LatentVideo;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"CVTF";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;

/// Appends the dtype, rank, dims and payload of one tensor.
pub(crate) fn put_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer; every read reports truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|e| e.to_string())
    }

    pub(crate) fn tensor(&mut self) -> std::result::Result<(Vec<usize>, Vec<f64>), String> {
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(format!("unsupported dtype {dtype}"));
        }
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(self.u64()?).map_err(|e| e.to_string())?);
        }
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
        let raw = self.bytes(len.checked_mul(8).ok_or("dims overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((dims, data))
    }

    pub(crate) fn finish(&self) -> std::result::Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(dims: &[usize], data: &[f64]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "payload does not match dims");
    let mut out = Vec::with_capacity(16 + 8 * dims.len() + 8 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_tensor(&mut out, dims, data);
    out
}

pub fn decode(buf: &[u8]) -> std::result::Result<(Vec<usize>, Vec<f64>), String> {
    let mut r = Reader::new(buf);
    if r.bytes(4)? != MAGIC {
        return Err("bad magic, not a tensor file".into());
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    fs::write(path, encode(dims, data)).map_err(CliError::io(path))
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let buf = fs::read(path).map_err(CliError::io(path))?;
    decode(&buf).map_err(|d| CliError::format(path, d))
}

pub fn write_video(path: &Path, video: &LatentVideo) -> Result<()> {
    write_tensor(path, &video.shape(), video.data())
}

pub fn read_video(path: &Path) -> Result<LatentVideo> {
    let (dims, data) = read_tensor(path)?;
    let shape: [usize; 4] = dims
        .as_slice()
        .try_into()
        .map_err(|_| CliError::format(path, format!("expected a rank-4 video, found dims {dims:?}")))?;
    Ok(LatentVideo::from_vec(shape, data)?)
}
