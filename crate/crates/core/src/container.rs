//! Versioned, checksummed binary container for named f32 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "HALLUCKP"
//! version    u32
//! fingerprint 32 bytes
//! header     u32 length + UTF-8 text
//! blocks     u32 count, then per block:
//!              u16 name length + UTF-8 name, u8 rank, rank x u64 dims,
//!              prod(dims) x f32
//! table      u32 rows, u32 cols, rows x cols x f64
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use halluc_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HALLUCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub fingerprint: [u8; 32],
    /// Free-form metadata, TOML by convention.
    pub header: String,
    pub blocks: Vec<(String, Tensor<f32>)>,
    /// Row-major numeric table with `table_cols` columns.
    pub table: Vec<f64>,
    pub table_cols: usize,
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl Container {
    pub fn block(&self, name: &str) -> Result<&Tensor<f32>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Integrity(format!("missing block {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(Error::Input(format!("block {name} cannot be encoded")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cols = self.table_cols.max(1);
        if self.table.len() % cols != 0 {
            return Err(Error::Input("table length is not a multiple of its width".into()));
        }
        out.extend_from_slice(&((self.table.len() / cols) as u32).to_le_bytes());
        out.extend_from_slice(&(self.table_cols as u32).to_le_bytes());
        for &v in &self.table {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = sha256(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 32 {
            return Err(Error::Integrity("file is truncated".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if &body[..8] != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        if sha256(body) != sum {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported format version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let hlen = r.u32()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec())
            .map_err(|_| Error::Integrity("header is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Integrity("block name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Integrity(format!("block {name} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(e.to_string()))?;
            blocks.push((name, t));
        }
        let rows = r.u32()? as usize;
        let table_cols = r.u32()? as usize;
        let n = rows * table_cols;
        let raw = r.take(n * 8)?;
        let table = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes before checksum".into()));
        }
        Ok(Self { fingerprint, header, blocks, table, table_cols })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            fingerprint: sha256(b"cfg"),
            header: "kind = \"test\"\n".into(),
            blocks: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("b/c".into(), Tensor::new(&[1], vec![7.0]).unwrap()),
            ],
            table: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            table_cols: 3,
        }
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.blocks[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_and_corruption() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(matches!(Container::from_bytes(&flipped), Err(Error::Integrity(_))));
    }
}
