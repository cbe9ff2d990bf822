//! Binary parameter checkpoints.
//!
//! Layout (all integers `u32` little-endian): magic `SQAP`, parameter count,
//! then per parameter the name length, UTF-8 name, rank, dims, and the
//! values as `f64` little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Array, Module, Parameter};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SQAP";

pub fn encode(params: &[&Parameter]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Decodes a checkpoint into `(name, array)` pairs in file order.
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Array)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let values = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = Array::from_vec(&dims, values).map_err(|e| e.to_string())?;
        out.push((name, array));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save<M: Module + ?Sized>(model: &M, path: &Path) -> Result<()> {
    let bytes = encode(&model.parameters());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Loads values into an already-constructed model; names and shapes must
/// match exactly.
pub fn load_into<M: Module + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let entries = decode(&bytes).map_err(format)?;
    let mut params = model.parameters_mut();
    if entries.len() != params.len() {
        return Err(format(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            params.len()
        )));
    }
    for (p, (name, array)) in params.iter_mut().zip(entries) {
        if p.name != name || p.value.shape() != array.shape() {
            return Err(format(format!(
                "parameter mismatch: checkpoint '{name}' {:?} vs model '{}' {:?}",
                array.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = array;
        p.zero_grad();
    }
    Ok(())
}
