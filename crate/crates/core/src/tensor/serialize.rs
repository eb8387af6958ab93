//! Binary tensor encoding: `rank: u32`, `extents: [u32; rank]`, then
//! `numel` little-endian `f64` values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::dim(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor. `offset` tracks the absolute stream position so that
/// errors can report where decoding failed.
pub fn read_tensor<R: Read>(r: &mut R, offset: &mut u64) -> Result<Tensor> {
    let rank = read_u32(r, offset)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(*offset - 4, format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = read_u32(r, offset)? as usize;
        if e == 0 {
            return Err(Error::format(*offset - 4, "zero tensor extent"));
        }
        shape.push(e);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::format(*offset, format!("tensor shape {shape:?} too large")))?;
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        read_exact(r, &mut buf, offset)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(&shape, data)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    *offset + filled as u64,
                    format!("unexpected end of data, needed {} more bytes", buf.len() - filled),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}
