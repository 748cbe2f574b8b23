//! DRBT on-disk tensor format.
//!
//! `D R B T` | u32 LE version = 1 | u32 LE ndim | ndim x u64 LE dims |
//! row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DRBT_MAGIC: [u8; 4] = *b"DRBT";
pub const DRBT_VERSION: u32 = 1;

pub fn write_drbt_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&DRBT_MAGIC)?;
    w.write_all(&DRBT_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_drbt_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != DRBT_MAGIC {
        return Err(Error::format(format!(
            "bad DRBT magic {magic:?}, expected {DRBT_MAGIC:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != DRBT_VERSION {
        return Err(Error::format(format!("unsupported DRBT version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut u64buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64buf)?;
        dims.push(u64::from_le_bytes(u64buf) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn write_drbt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_drbt_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_drbt(path: impl AsRef<Path>) -> Result<Tensor> {
    read_drbt_from(&mut BufReader::new(File::open(path)?))
}
