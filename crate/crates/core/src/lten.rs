//! `LTEN` binary tensor records.
//!
//! Layout, all little-endian: magic `b"LTEN"`, `u32` version (1), `u8` dtype,
//! `u8` rank, `rank × u32` dims, then the row-major payload. Dtype 0 is f32;
//! dtype 1 is f64, used by checkpoints so parameters survive bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTEN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

/// Cursor over a byte buffer that reports absolute offsets on failure.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, have {}",
                    self.remaining()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let start = self.pos;
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::format(start, "bad magic, expected LTEN"));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let at = self.pos;
        let dtype = match self.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::format(at, format!("unknown dtype {other}"))),
        };
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = self.take(n * dtype.width(), "payload")?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(shape, data)
    }
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    let t = r.tensor()?;
    if r.remaining() != 0 {
        return Err(Error::format(r.pos(), "trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode(t, dtype, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
