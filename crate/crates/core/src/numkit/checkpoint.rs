//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic      8 bytes  "CNAVCKPT"
//! version    u32      1
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of tensors, sorted by name
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim x u32 extents
//!   payload  product(extents) x f32 little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumError;

pub const MAGIC: &[u8; 8] = b"CNAVCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata; the model layer stores its config here as JSON.
    pub meta: String,
    pub params: ParamStore<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, ckpt.meta.len() as u32);
    out.extend_from_slice(ckpt.meta.as_bytes());
    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, t) in ckpt.params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumError> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize) -> Result<String, NumError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| NumError::Checkpoint(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, NumError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta = c.string(meta_len)?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(NumError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { meta, params })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), NumError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, NumError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
