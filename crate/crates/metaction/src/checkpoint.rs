//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MACTCKPT"
//! version  u32
//! config   u32 length + UTF-8 JSON PolicyConfig
//! count    u32
//! count x  { u32 name length, name, u32 rank, rank x u64 dims, f64 data... }
//! ```
//!
//! Tensors are written in name order. Loading checks the tensor set and
//! shapes against the manifest implied by the stored config.

use std::fs;
use std::path::Path;

use metaction_core::policy::{ParamStore, Policy, PolicyConfig, PolicyError, Tensor};

pub const MAGIC: &[u8; 8] = b"MACTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("tensor {name}: rank {rank} or size overflows")]
    Size { name: String, rank: u32 },
    #[error("config: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub fn encode(policy: &Policy) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(16 + policy.params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&policy.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(policy.params.len() as u32).to_le_bytes());
    for (name, t) in policy.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Policy, CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let config: PolicyConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Name)?.to_string();
        let rank = r.u32()?;
        let mut shape = Vec::new();
        let mut size = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).ok();
            size = d.and_then(|d| size.checked_mul(d)).ok_or_else(|| CheckpointError::Size { name: name.clone(), rank })?;
            shape.push(d.expect("checked above"));
        }
        let raw = r.take(size.checked_mul(8).ok_or_else(|| CheckpointError::Size { name: name.clone(), rank })?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor { shape, data });
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.at));
    }
    Ok(Policy::from_params(config, params)?)
}

pub fn save(policy: &Policy, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(policy)?).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Policy, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let p = Policy::new(PolicyConfig::micro(), 3).unwrap();
        let bytes = encode(&p).unwrap();
        assert_eq!(decode(&bytes).unwrap(), p);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Trailing(1))));
        assert!(matches!(decode(b"nope"), Err(CheckpointError::BadMagic)));
    }
}
