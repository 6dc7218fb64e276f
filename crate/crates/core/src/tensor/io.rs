//! The `DGT1` binary tensor format.
//!
//! Layout: magic `DGT1`, u32 LE order `N`, `N` u32 LE extents, then
//! `∏ extents` f64 LE values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const DGT1_MAGIC: &[u8; 4] = b"DGT1";

// Guards against absurd allocations from corrupt headers.
const MAX_ORDER: u32 = 64;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(DGT1_MAGIC)?;
    w.write_all(&(t.order() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing DGT1 header: {e}")))?;
    if &magic != DGT1_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let order = read_u32(r)?;
    if order == 0 || order > MAX_ORDER {
        return Err(Error::Format(format!("unsupported tensor order {order}")));
    }
    let mut shape = Vec::with_capacity(order as usize);
    for _ in 0..order {
        let d = read_u32(r)?;
        if d == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        shape.push(d as usize);
    }
    Ok(shape)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated DGT1 data: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let shape = read_header(r)?;
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            len * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    read_tensor(&mut BufReader::new(f))
}
