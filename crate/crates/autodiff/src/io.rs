//! Flat binary array files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  b"MXAR"
//! version  u32      1
//! count    u32      number of arrays
//! repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8     1 = f32, 2 = f64
//!   ndim     u8
//!   dims     u64 x ndim
//!   payload  row-major elements, dtype-sized, little-endian
//! ```

use std::io::{Read, Write};

use crate::real::{DType, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MXAR";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArrayFileError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not an array file")]
    BadMagic,
    #[error("unsupported array file version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("array `{0}` has {1} dimensions; only 1-D and 2-D arrays are supported")]
    Rank(String, u8),
    #[error("array name is not valid UTF-8")]
    Name,
}

/// A named array as stored on disk, always widened to f64 in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            dims: vec![t.rows(), t.cols()],
            data: t.to_f64_vec(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        };
        Tensor::from_vec(r, c, self.data.iter().map(|&x| T::lit(x)).collect())
    }
}

pub fn write_arrays<W: Write>(mut w: W, arrays: &[NamedArray]) -> Result<(), ArrayFileError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[a.dtype.code(), a.dims.len() as u8])?;
        for &d in &a.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(a.data.len() * a.dtype.size_of());
        match a.dtype {
            DType::F32 => a
                .data
                .iter()
                .for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::F64 => a
                .data
                .iter()
                .for_each(|&x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ArrayFileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<NamedArray>, ArrayFileError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ArrayFileError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ArrayFileError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ArrayFileError::Name)?;
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let dtype = DType::from_code(hdr[0]).ok_or(ArrayFileError::DType(hdr[0]))?;
        let ndim = hdr[1];
        if ndim == 0 || ndim > 2 {
            return Err(ArrayFileError::Rank(name, ndim));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * dtype.size_of()];
        r.read_exact(&mut buf)?;
        let data = match dtype {
            DType::F32 => buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        out.push(NamedArray {
            name,
            dtype,
            dims,
            data,
        });
    }
    Ok(out)
}
