//! Binary tensor container.
//!
//! Layout: magic `MGT1`, then tensor records back to back until end of file.
//! Each record is `name_len: u64 LE`, UTF-8 name bytes, `rank: u64 LE`,
//! `rank` extents as u64 LE, then `prod(extents)` values as f64 LE bit
//! patterns. Writing the same tensors twice produces identical bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGT1";

pub fn write_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(MAGIC);
    for (name, t) in tensors {
        encode_record(&mut buf, name, t);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn encode_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.expect_magic(MAGIC)?;
    let mut out = Vec::new();
    while !r.at_end() {
        out.push(r.record()?);
    }
    Ok(out)
}

/// Byte-level reader that reports the offset of any truncation.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(TensorError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Truncated {
                offset: self.pos as u64,
                what: format!("{what} needs {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u64("name length")? as usize;
        let name_bytes = self.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| TensorError::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = self.u64("rank")? as usize;
        if rank > 8 {
            return Err(TensorError::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64("tensor data")?);
        }
        Ok((name, Tensor::from_vec(shape, data).expect("consistent by construction")))
    }
}
