//! GTTR tensor encoding: `"GTTR"`, u32 version, u8 rank, u64 extents, f32 payload,
//! all little-endian and row-major.

use std::io::{Read, Write};

use super::Tensor;
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GTTR";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    let mut buf = Vec::with_capacity(9 + 8 * t.rank() + 4 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io("writing tensor", e))
}

pub(crate) fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::io("reading tensor data", e))?;
    Ok(b)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    read_tensor_body(r)
}

/// Reads a tensor whose magic has already been consumed.
pub(crate) fn read_tensor_body<R: Read>(r: &mut R) -> Result<Tensor> {
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let [rank] = read_exact::<_, 1>(r)?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(r)?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    let n: usize = shape.iter().product();
    if n > (1 << 34) {
        return Err(Error::Format(format!("tensor {shape:?} too large")));
    }
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|e| Error::io("reading tensor payload", e))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}
