//! Binary checkpoint format shared by denoisers and attackers.
//!
//! Layout, all little-endian: magic `PLLB`, `u32` version, then segments until
//! end of file. Each segment is `u32` name length, UTF-8 name bytes, `u32`
//! rank, `rank` × `u64` dims, and `Π dims` × `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::numkit::Matrix;
use crate::{ensure, Error, Result};

pub const MAGIC: &[u8; 4] = b"PLLB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            values: m.data().to_vec(),
        }
    }

    /// Rank-2 view; rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [n] => Matrix::from_vec(1, *n as usize, self.values.clone()),
            [r, c] => Matrix::from_vec(*r as usize, *c as usize, self.values.clone()),
            d => Err(Error::Format(format!("segment {} has rank {}, expected 1 or 2", self.name, d.len()))),
        }
    }
}

pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for t in tensors {
        let count: u64 = t.dims.iter().product();
        ensure!(
            count as usize == t.values.len(),
            Dimension,
            "segment {} dims {:?} hold {} values, got {}",
            t.name,
            t.dims,
            count,
            t.values.len()
        );
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.bytes.len(), Format, "truncated checkpoint at byte {}", self.pos);
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    ensure!(cur.take(4)? == MAGIC, Format, "bad magic");
    let version = cur.u32()?;
    ensure!(version == VERSION, Format, "unsupported checkpoint version {version}");
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or_else(|| Error::Format(format!("segment {name} dims overflow")))? as usize;
        ensure!(count * 8 <= bytes.len() - cur.pos, Format, "segment {name} truncated");
        let values = (0..count)
            .map(|_| cur.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push(Tensor { name, dims, values });
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn from_named_matrices(parts: &[(String, Matrix)]) -> Vec<Tensor> {
    parts.iter().map(|(n, m)| Tensor::from_matrix(n.clone(), m)).collect()
}

pub fn to_named_matrices(tensors: &[Tensor]) -> Result<Vec<(String, Matrix)>> {
    tensors.iter().map(|t| Ok((t.name.clone(), t.to_matrix()?))).collect()
}
