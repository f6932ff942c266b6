//! Binary container of named tensors.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "G1CK" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f64 LE values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{open, Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"G1CK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian cursor over a byte buffer with field-named errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated input while reading {field} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn tensor_body(&mut self, field: &str) -> Result<Tensor> {
        let rank = self.u32(&format!("{field} rank"))? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(format!("{field} rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(self.u32(&format!("{field} dim {i}"))? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8, &format!("{field} values"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_tensor_body(&mut out, t);
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic (expected G1CK)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = r.u32(&format!("tensor {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("tensor {i} name"))?)
            .map_err(|_| Error::format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let t = r.tensor_body(&format!("tensor `{name}`"))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(tensors))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
