//! BTF1 binary tensor format.
//!
//! Layout: magic `BTENSOR1`, u32 rank (always 4), four u32 dims (N, C, T, F),
//! u8 precision code (0 = f32, 1 = f64), then raw little-endian values in C order.
//! All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Precision, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub const BTF_MAGIC: &[u8; 8] = b"BTENSOR1";
const BTF_PREFIX: &[u8; 7] = b"BTENSOR";

/// A tensor of either precision, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    /// Converts to the requested precision.
    pub fn into_precision<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor_to<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * 5 + 1 + t.len() * T::BYTES);
    buf.extend_from_slice(BTF_MAGIC);
    buf.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape().0 {
        let d = u32::try_from(d).map_err(|_| Error::shape("dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.push(T::PRECISION as u8);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_values<T: Scalar, R: Read>(r: &mut R, shape: Shape) -> Result<Tensor<T>> {
    let mut raw = vec![0u8; shape.numel() * T::BYTES];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Reads one tensor; `origin` labels errors.
pub fn read_tensor_from<R: Read>(r: &mut R, origin: &Path) -> Result<AnyTensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(origin, "truncated tensor header"))?;
    if &magic != BTF_MAGIC {
        if &magic[..7] == BTF_PREFIX && magic[7].is_ascii_digit() {
            return Err(Error::UnsupportedVersion {
                found: u32::from(magic[7] - b'0'),
                supported: 1,
            });
        }
        return Err(Error::format(origin, "bad tensor magic"));
    }
    let rank = read_u32(r)?;
    if rank != 4 {
        return Err(Error::format(origin, format!("rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u32(r)? as usize;
    }
    let shape = Shape(dims);
    if dims.contains(&0) {
        return Err(Error::format(origin, format!("zero dimension in {shape}")));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    match code[0] {
        0 => Ok(AnyTensor::F32(read_values(r, shape)?)),
        1 => Ok(AnyTensor::F64(read_values(r, shape)?)),
        other => Err(Error::format(origin, format!("precision code {other}"))),
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r, path)
}
