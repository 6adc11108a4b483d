use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"TDPTENS1";

/// `magic | ndim: u32 | dims: u32 × ndim | payload: f32 × Π dims`, all
/// little-endian.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("missing TDPTENS1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let ndim = word(8) as usize;
    let header = 12 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for {ndim} dimensions")));
    }
    let shape: Vec<usize> = (0..ndim).map(|i| word(12 + 4 * i) as usize).collect();
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows".into()))?;
    if bytes.len() - header != 4 * numel {
        return Err(bad(format!("payload has {} bytes, shape {:?} needs {}", bytes.len() - header, shape, 4 * numel)));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?, path)
}
