//! The `SKT1` tensor file format.
//!
//! Layout: magic `SKT1`, a `u8` rank, `rank` little-endian `u32` dims, then
//! the float32 little-endian payload in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SKT1";

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a complete SKT1 buffer; `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
        });
    }
    let truncated = |expected: usize| Error::TruncatedPayload {
        path: origin.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    let rank = *bytes.get(4).ok_or_else(|| truncated(5))? as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let expected = header + 4 * numel;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::SizeMismatch {
            path: origin.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the header and returns the shape.
pub fn read_shape(path: &Path) -> Result<Vec<usize>> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 5];
    f.read_exact(&mut head).map_err(|_| Error::TruncatedPayload {
        path: path.to_path_buf(),
        expected: 5,
        found: 0,
    })?;
    if &head[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut dims = vec![0u8; 4 * head[4] as usize];
    f.read_exact(&mut dims).map_err(|_| Error::TruncatedPayload {
        path: path.to_path_buf(),
        expected: 5 + dims.len(),
        found: 5,
    })?;
    Ok(dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}
