//! Checkpoint files.
//!
//! ```text
//! magic       8 bytes "FRTCKPT\0"
//! version     u32 = 1
//! embed_dim   u32, heads u32, layers u32, clip f64
//! meta        u32 count, then (u32 len + utf8 key, u32 len + utf8 value) pairs
//! layout      u32 tensor count, then per tensor: u32 len + utf8 name, u32 rank, rank x u64 dims
//! data        u64 length, then length x f64
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::params::{ArchConfig, Layout, ParamVector};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FRTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type Meta = BTreeMap<String, String>;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(params: &ParamVector, meta: &Meta) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let a = params.arch;
    for v in [a.embed_dim, a.heads, a.layers] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&a.clip.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    let entries = params.layout.entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape) in entries {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for x in &params.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len().saturating_sub(self.pos) < k {
            return Err("truncated checkpoint".into());
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> std::result::Result<(ParamVector, Meta), String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let arch = ArchConfig {
        embed_dim: r.u32()? as usize,
        heads: r.u32()? as usize,
        layers: r.u32()? as usize,
        clip: r.f64()?,
    };
    arch.validate().map_err(|e| e.to_string())?;
    let mut meta = Meta::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        entries.push((name, shape));
    }
    let layout = Layout::new(entries).map_err(|e| e.to_string())?;
    if layout != arch.layout() {
        return Err("stored layout does not match its architecture".into());
    }
    let len = r.u64()? as usize;
    if len != layout.total_len() {
        return Err(format!("{len} values for a layout of {}", layout.total_len()));
    }
    let data = r
        .take(len.checked_mul(8).ok_or("length overflow")?)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.pos != buf.len() {
        return Err("trailing bytes after parameter data".into());
    }
    Ok((
        ParamVector {
            arch,
            layout: Arc::new(layout),
            data,
        },
        meta,
    ))
}

pub fn save_checkpoint(params: &ParamVector, meta: &Meta, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, Meta)> {
    let buf = fs::read(path)?;
    decode_checkpoint(&buf).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

/// Loads a checkpoint and requires it to match the architecture of the current run.
pub fn load_checkpoint_for(path: &Path, arch: &ArchConfig) -> Result<(ParamVector, Meta)> {
    let (params, meta) = load_checkpoint(path)?;
    if params.arch != *arch {
        return Err(Error::LayoutMismatch(format!(
            "checkpoint {} has {:?}, run expects {:?}",
            path.display(),
            params.arch,
            arch
        )));
    }
    Ok((params, meta))
}
