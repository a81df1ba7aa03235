//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DENC" | version | tensor count
//! per tensor: name length | name bytes (UTF-8) | rank | extents... | f32 values
//! ```

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"DENC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("invalid tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("missing tensor {0}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes tensors in the given order. Values are narrowed to `f32`.
pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, tensors.len() as u32);
    for nt in tensors {
        put_u32(&mut out, nt.name.len() as u32);
        out.extend_from_slice(nt.name.as_bytes());
        put_u32(&mut out, nt.tensor.rank() as u32);
        for &e in nt.tensor.shape() {
            put_u32(&mut out, e as u32);
        }
        for &v in nt.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    w.write_all(&encode(tensors))?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = get_u32(&mut r)? as usize;
    let mut tensors: Vec<NamedTensor> = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        if tensors.iter().any(|t| t.name == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        let rank = get_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(get_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::BadTensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        tensors.push(NamedTensor { name, tensor });
    }
    Ok(tensors)
}

/// Hex SHA-256 of the encoded checkpoint.
pub fn fingerprint(tensors: &[NamedTensor]) -> String {
    hex::encode(Sha256::digest(encode(tensors)))
}
