//! Binary tensor encoding: `MUT0`, `u32` rank, `rank × u64` dimensions, then
//! the row-major data as little-endian `f64`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MUT0";

// Upper bound on a single tensor read, so a corrupt header cannot request
// an absurd allocation.
const MAX_ELEMENTS: u64 = 1 << 32;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("tensor stream: {e}"))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC).map_err(io_err)?;
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut total: u64 = 1;
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(io_err)?;
        let d = u64::from_le_bytes(b8);
        total = total.saturating_mul(d);
        shape.push(d as usize);
    }
    if total > MAX_ELEMENTS {
        return Err(Error::Format(format!("tensor of {total} elements is too large")));
    }
    let mut data = Vec::with_capacity(total as usize);
    for _ in 0..total {
        r.read_exact(&mut b8).map_err(io_err)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}
