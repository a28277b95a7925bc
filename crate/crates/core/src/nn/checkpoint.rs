//! "TPOW" parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`, payload little-endian `f32`):
//! magic `TPOW`, metadata length and UTF-8 metadata text, entry count, then per
//! entry: name length, UTF-8 name, rank, `rank` extents, and the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"TPOW";

/// A parsed checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form text stored alongside the weights, e.g. `config_hash=...` lines.
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, meta: &str, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(meta.as_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        out.write_all(&(e.name.len() as u32).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&(e.value.rank() as u32).to_le_bytes())?;
        for &d in e.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in e.value.data() {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, meta: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, meta, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Length {
                expected: self.pos + n,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a checkpoint; tensors stay in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("checkpoint does not start with TPOW".into()));
    }
    let meta_len = c.u32()?;
    let meta = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()?;
        let name =
            String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - c.pos
        )));
    }
    Ok(Checkpoint { meta, tensors: out })
}

/// Loads checkpoint values into `store` and returns the metadata; names and shapes must match exactly.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<String> {
    let ckpt = read_checkpoint(fs::File::open(path)?)?;
    store.load_values(ckpt.tensors.into_iter().map(|(n, t)| (n, t.cast())).collect())?;
    Ok(ckpt.meta)
}
