//! `HJVF` binary field format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"HJVF"  version: u32  ndims: u32
//! ndims x { n: u64, min: f64, max: f64 }
//! prod(n) x f64 values, row-major, last axis fastest
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::{Axis, Grid, GridError, ScalarField};

pub const MAGIC: &[u8; 4] = b"HJVF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported HJVF version {0}")]
    UnsupportedVersion(u32),
    #[error("node count overflows")]
    TooLarge,
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub fn write_field<W: Write>(mut w: W, field: &ScalarField) -> Result<(), FormatError> {
    let grid = field.grid();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(grid.ndims() as u32).to_le_bytes())?;
    for a in grid.axes() {
        w.write_all(&(a.n as u64).to_le_bytes())?;
        w.write_all(&a.min.to_le_bytes())?;
        w.write_all(&a.max.to_le_bytes())?;
    }
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<ScalarField, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let ndims = read_u32(&mut r)? as usize;
    let mut axes = Vec::with_capacity(ndims.min(64));
    let mut count: usize = 1;
    for _ in 0..ndims {
        let n = usize::try_from(read_u64(&mut r)?).map_err(|_| FormatError::TooLarge)?;
        let min = read_f64(&mut r)?;
        let max = read_f64(&mut r)?;
        count = count.checked_mul(n).ok_or(FormatError::TooLarge)?;
        axes.push(Axis::new(min, max, n));
    }
    let grid = Grid::new(axes)?;
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok(ScalarField::new(grid, values)?)
}

pub fn save(path: impl AsRef<Path>, field: &ScalarField) -> Result<(), FormatError> {
    write_field(BufWriter::new(File::create(path)?), field)
}

pub fn load(path: impl AsRef<Path>) -> Result<ScalarField, FormatError> {
    read_field(BufReader::new(File::open(path)?))
}

pub fn to_bytes(field: &ScalarField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 24 * field.grid().ndims() + 8 * field.values().len());
    write_field(&mut out, field).expect("writing to a Vec cannot fail");
    out
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
