//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "JLCKPT\0\x01"
//! version      u32
//! float width  u8       4 or 8
//! meta length  u64, then that many bytes of UTF-8 metadata
//! tensor count u32
//! per tensor:  name length u32, name bytes, rank u32, rank × u64 dims
//! payload:     each tensor's values, row-major, in table order
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;

pub const MAGIC: [u8; 8] = *b"JLCKPT\0\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    pub fn bytes(self) -> u8 {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unsupported float width {0} bytes")]
    UnsupportedFloatWidth(u8),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub width: FloatWidth,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    metadata: &str,
    tensors: &[(String, Tensor)],
    width: FloatWidth,
) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[width.bytes()])?;
    w.write_all(&(metadata.len() as u64).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        match width {
            FloatWidth::F64 => {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            FloatWidth::F32 => {
                for v in t.data() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let mut wb = [0u8; 1];
    read_exact(&mut r, &mut wb)?;
    let width = match wb[0] {
        4 => FloatWidth::F32,
        8 => FloatWidth::F64,
        other => return Err(CheckpointError::UnsupportedFloatWidth(other)),
    };
    let meta_len = read_u64(&mut r)?;
    let metadata = String::from_utf8(read_vec(&mut r, meta_len)?)
        .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
    let count = read_u32(&mut r)?;
    let mut table = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as u64;
        let name = String::from_utf8(read_vec(&mut r, name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        table.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("shape overflow for {name}")))?;
        let bytes = read_vec(&mut r, (n as u64) * width.bytes() as u64)?;
        let data: Vec<f64> = match width {
            FloatWidth::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            FloatWidth::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.push((name, t));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        metadata,
        width,
        tensors,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec<R: Read>(r: &mut R, len: u64) -> Result<Vec<u8>, CheckpointError> {
    // Read through `take` so a corrupt length cannot force a huge allocation.
    let mut out = Vec::new();
    r.by_ref().take(len).read_to_end(&mut out)?;
    if out.len() as u64 != len {
        return Err(CheckpointError::Truncated);
    }
    Ok(out)
}
