//! `DFMC` checkpoint container.
//!
//! Layout (little-endian): magic `DFMC`, u32 version, u32 config length +
//! UTF-8 JSON config, u32 tensor count, then per tensor a directory entry
//! (u32 name length + name, u8 dtype (0 = f32), u32 rank, u64 dims, u64
//! payload offset from the start of the payload section), then the f32 payloads.

use crate::tensor::{ParamStore, Tensor};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unsupported dtype tag {0}")]
    UnknownDtype(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// JSON config blob.
    pub config: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self { config: config.into(), tensors: BTreeMap::new() }
    }

    /// Add every parameter of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (k, p) in store.iter() {
            self.tensors.insert(format!("{prefix}{k}"), p.value.clone());
        }
    }

    /// Overwrite the values of `store` from tensors under `prefix`. Every
    /// parameter must be present with a matching shape.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        for (k, p) in store.iter_mut() {
            let key = format!("{prefix}{k}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor `{key}`")))?;
            if t.shape != p.value.shape {
                return Err(CheckpointError::Malformed(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape, p.value.shape
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let clen = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::UnknownDtype(dtype));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?);
            }
            let offset = r.u64()?;
            dir.push((name, shape, offset));
        }
        let base = r.pos;
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in dir {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let start = usize::try_from(offset)
                .ok()
                .and_then(|o| o.checked_add(base))
                .ok_or(CheckpointError::Truncated)?;
            let bytes = n.checked_mul(4).ok_or(CheckpointError::Truncated)?;
            let end = start.checked_add(bytes).ok_or(CheckpointError::Truncated)?;
            let raw = buf.get(start..end).ok_or(CheckpointError::Truncated)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io { path: path.to_path_buf(), source: e };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        std::fs::write(path, self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_bytes(&bytes)
    }
}
