//! Binary checkpoint format.
//!
//! ```text
//! "DRL4R1"
//! repeated: u32 name_len, name bytes, u32 rank, rank x u32 dim, f64 values (row-major)
//! u64 parameter count
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use super::ParameterStore;

pub const MAGIC: &[u8; 6] = b"DRL4R1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("parameter name at offset {offset} is not valid UTF-8")]
    BadName { offset: usize },
    #[error("trailing count says {stored} parameters, found {found}")]
    CountMismatch { stored: u64, found: u64 },
    #[error("{extra} unexpected bytes after the parameter count at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint parameter {0} is not part of the model")]
    Unexpected(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn to_bytes(params: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a whole checkpoint. Nothing is returned unless every byte checks out.
pub fn from_bytes(buf: &[u8]) -> Result<ParameterStore, CheckpointError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let mut store = ParameterStore::new();
    // Every record is at least 8 bytes longer than the trailing count.
    while r.remaining() > 8 {
        let len = r.u32()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::BadName { offset: name_at })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let size: usize = shape.iter().product();
        let raw = r.take(size.checked_mul(8).ok_or(CheckpointError::Truncated {
            offset: r.pos,
            needed: usize::MAX,
        })?)?;
        let value = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, shape, value);
    }
    let stored = r.u64()?;
    if stored != store.len() as u64 {
        return Err(CheckpointError::CountMismatch {
            stored,
            found: store.len() as u64,
        });
    }
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes {
            offset: r.pos,
            extra: r.remaining(),
        });
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParameterStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

/// Copies checkpoint values into a model whose layout is already known,
/// requiring identical names and shapes.
pub fn load_into(model: &mut ParameterStore, loaded: &ParameterStore) -> Result<(), CheckpointError> {
    for (name, p) in model.iter() {
        let found = loaded
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if found.shape != p.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: p.shape.clone(),
                found: found.shape.clone(),
            });
        }
    }
    if let Some((name, _)) = loaded.iter().find(|(n, _)| model.get(n).is_none()) {
        return Err(CheckpointError::Unexpected(name.to_string()));
    }
    for (name, p) in model.iter_mut() {
        p.value.copy_from_slice(&loaded.get(name).unwrap().value);
    }
    Ok(())
}
