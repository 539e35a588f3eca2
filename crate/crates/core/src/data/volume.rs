//! `RVOL` v1: magic `52 56 4F 4C 01`, then little-endian `u32` D, H, W and
//! `D·H·W` `f32` voxels in row-major (d, h, w) order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: [u8; 5] = *b"RVOL\x01";
const HEADER_LEN: usize = 5 + 3 * 4;

pub fn encode_volume(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.rank() != 3 {
        return Err(Error::InvalidShape {
            dims: t.dims().to_vec(),
            reason: "volumes are rank 3 (D, H, W)".into(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(&VOLUME_MAGIC);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor<f32>> {
    let parse = |offset: usize, reason: String| Error::Parse {
        offset: offset as u64,
        reason,
    };
    if let Some(i) = VOLUME_MAGIC
        .iter()
        .zip(bytes)
        .position(|(want, got)| want != got)
    {
        return Err(parse(i, format!("bad magic byte {:#04x}", bytes[i])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(parse(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
        if *d == 0 {
            return Err(parse(at, "zero extent".into()));
        }
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse(5, format!("extents {dims:?} overflow")))?;
    let body = &bytes[HEADER_LEN..];
    let expected = count.checked_mul(4).ok_or_else(|| parse(5, "extents overflow".into()))?;
    if body.len() < expected {
        return Err(parse(
            bytes.len(),
            format!("truncated voxel data: expected {count} floats, found {}", body.len() / 4),
        ));
    }
    if body.len() > expected {
        return Err(parse(HEADER_LEN + expected, "trailing bytes after voxel data".into()));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(parse(HEADER_LEN + 4 * i, format!("non-finite voxel {v}")));
        }
        data.push(v);
    }
    Tensor::new(dims.to_vec(), data)
}

pub fn write_volume(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_volume(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
