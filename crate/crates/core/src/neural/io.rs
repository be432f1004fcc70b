//! Binary model files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "CQUNET\0\0" | version u32 | depth u32 | base u32 | height u32 | width u32
//! dropout f64 | seed u64 | adam_step u64 | param_count u64
//! params f32 × n | adam_m f32 × n | adam_v f32 × n | crc32 u32
//! ```
//!
//! The CRC covers every preceding byte.

use std::path::Path;

use super::{AdamState, UNet, UNetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CQUNET\0\0";
pub const VERSION: u32 = 1;
/// Bytes before the first parameter.
pub const HEADER_LEN: usize = 8 + 4 * 5 + 8 * 4;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

pub fn save_model(model: &UNet<f32>) -> Vec<u8> {
    let cfg = model.config();
    let n = model.param_count();
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * n + 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, cfg.depth as u32, cfg.base_channels as u32, cfg.input_size.0 as u32, cfg.input_size.1 as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&model.adam_state().step.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let adam = model.adam_state();
    for blob in [model.params(), &adam.m[..], &adam.v[..]] {
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt_err("truncated model file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| fmt_err("parameter count overflows"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn load_model(bytes: &[u8]) -> Result<UNet<f32>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(fmt_err("file too short for a model header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt_err("bad magic; not a model file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(fmt_err("checksum mismatch; file is corrupted"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported model version {version} (expected {VERSION})")));
    }
    let depth = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let dropout_p = f64::from_bits(r.u64()?);
    let seed = r.u64()?;
    let step = r.u64()?;
    let n = usize::try_from(r.u64()?).map_err(|_| fmt_err("parameter count overflows"))?;
    let config = UNetConfig { depth, base_channels, dropout_p, input_size: (h, w), seed };
    config.validate().map_err(|e| fmt_err(format!("bad config in header: {e}")))?;
    let params = r.f32s(n)?;
    let m = r.f32s(n)?;
    let v = r.f32s(n)?;
    if r.pos != body.len() {
        return Err(fmt_err("trailing bytes after payload"));
    }
    UNet::from_parts(config, params, Some(AdamState { m, v, step })).map_err(|e| fmt_err(e.to_string()))
}

pub fn save_model_file(model: &UNet<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, save_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model_file(path: &Path) -> Result<UNet<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_model(&bytes)
}
