//! Binary checkpoint container.
//!
//! ```text
//! "SPKCKPT1"
//! u64 LE  seed
//! u32 LE  spec length, then the model spec as JSON
//! u32 LE  tensor count, then per tensor:
//!     u32 LE name length, name (UTF-8)
//!     u32 LE rank, rank × u64 LE dims
//!     numel × f32 LE values
//! 32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelSpec, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPKCKPT1";

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&model.seed.to_le_bytes());
    let spec = serde_json::to_vec(&model.spec).map_err(|e| Error::Serde(e.to_string()))?;
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&buf);
    buf.extend_from_slice(&sum);
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(self.err("truncated checkpoint"));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let fail = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    };
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail(0, "not a checkpoint (bad magic)"));
    }
    let body_len = bytes.len() - 32;
    if Sha256::digest(&bytes[..body_len])[..] != bytes[body_len..] {
        return Err(fail(body_len, "checksum mismatch"));
    }
    let mut c = Cursor {
        buf: &bytes[..body_len],
        pos: MAGIC.len(),
        path,
    };
    let seed = c.u64()?;
    let n = c.u32()?;
    let spec: ModelSpec = serde_json::from_slice(c.take(n)?).map_err(|e| c.err(format!("bad spec: {e}")))?;
    let count = c.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| c.err("tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| c.err("shape overflow"))?;
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| c.err("shape overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    if c.pos != body_len {
        return Err(c.err("trailing bytes"));
    }
    spec.validate()?;
    let reference = super::build_model(spec.clone(), seed)?;
    let layout_ok = reference.params.len() == params.len()
        && reference
            .params
            .iter()
            .zip(&params)
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !layout_ok {
        return Err(fail(0, "tensor layout does not match the model spec"));
    }
    Ok(Model { spec, seed, params })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
