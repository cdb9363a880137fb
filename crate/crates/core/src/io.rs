//! Named-tensor container used for checkpoints, training state and dataset
//! caches.
//!
//! Layout (little-endian): magic `DTVT`, `u32` version = 1, `u32` tensor
//! count, then per tensor: `u16` name length, UTF-8 name, `u8` dtype code,
//! `u8` rank, `rank × u64` extents, raw scalar data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTVT";
pub const VERSION: u32 = 1;

/// One stored tensor of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
            Stored::U32 { .. } => DType::U32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
            Stored::U32 { shape, .. } => shape,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F64 => Stored::F64(t.cast()),
            _ => Stored::F32(t.cast()),
        }
    }

    /// Float payload converted to `T`; the stored dtype must match `T`.
    pub fn to_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match (self, T::DTYPE) {
            (Stored::F32(t), DType::F32) => Ok(t.cast()),
            (Stored::F64(t), DType::F64) => Ok(t.cast()),
            _ => Err(Error::Format(format!(
                "tensor `{name}` has dtype {:?}, expected {:?}",
                self.dtype(),
                T::DTYPE
            ))),
        }
    }

    pub fn as_u32(&self, name: &str) -> Result<&[u32]> {
        match self {
            Stored::U32 { data, .. } => Ok(data),
            _ => Err(Error::Format(format!("tensor `{name}` is not u32"))),
        }
    }
}

pub fn encode(entries: &[(String, Stored)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.dtype() as u8);
        let shape = t.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t {
            Stored::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Stored::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Stored::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Stored)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic (expected DTVT)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        let bytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("byte count overflow".into()))?;
        let raw = r.take(bytes)?;
        let stored = match dtype {
            DType::F32 => Stored::F32(Tensor::new(shape, raw.chunks(4).map(f32::read_le).collect())?),
            DType::F64 => Stored::F64(Tensor::new(shape, raw.chunks(8).map(f64::read_le).collect())?),
            DType::U32 => Stored::U32 {
                shape,
                data: raw.chunks(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect(),
            },
        };
        out.push((name, stored));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_file(path: &Path, entries: &[(String, Stored)]) -> Result<()> {
    std::fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Stored)>> {
    decode(&std::fs::read(path)?)
}
