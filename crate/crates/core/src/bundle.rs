//! `NIBT` tensor bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "NIBT" | version u32 = 1 | count u32
//! per entry: name_len u32 | name (UTF-8) | dtype u8 (0 = f32) | rank u8
//!            | dims u32 x rank | payload f32 x product(dims), row-major
//! ```
//!
//! Names are unique and nothing may follow the last entry.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NIBT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct BundleEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl BundleEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let entry = Self {
            name: name.into(),
            shape,
            data,
        };
        entry.check()?;
        Ok(entry)
    }

    /// Narrows an engine tensor to f32 storage.
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Widens the payload to f64. Fails on non-finite values.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// True when names, shapes and payload bits all match.
    pub fn bitwise_eq(&self, other: &BundleEntry) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check(&self) -> Result<()> {
        if self.name.len() > u32::MAX as usize {
            return Err(Error::Parameter(format!(
                "entry name of {} bytes",
                self.name.len()
            )));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Parameter(format!(
                "{}: rank {} > 255",
                self.name,
                self.shape.len()
            )));
        }
        if let Some(d) = self.shape.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::Parameter(format!(
                "{}: dim {d} exceeds u32",
                self.name
            )));
        }
        let expected = element_count(&self.shape)
            .ok_or_else(|| Error::Parameter(format!("{}: element count overflows", self.name)))?;
        if expected != self.data.len() {
            return Err(Error::Shape {
                op: "bundle entry",
                detail: format!(
                    "{}: shape {:?} vs {} values",
                    self.name,
                    self.shape,
                    self.data.len()
                ),
            });
        }
        Ok(())
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn write_bundle(entries: &[BundleEntry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for e in entries {
        e.check()?;
        if !seen.insert(e.name.as_str()) {
            return Err(Error::DuplicateName(e.name.clone()));
        }
    }
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Parameter(format!("{} entries exceed u32", entries.len())))?;
    let payload: usize = entries
        .iter()
        .map(|e| 4 + e.name.len() + 2 + 4 * e.shape.len() + 4 * e.data.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_bundle(bytes: &[u8]) -> Result<Vec<BundleEntry>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::InvalidName)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Dtype(dtype));
        }
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        // a count that overflows can never be satisfied by the remaining bytes
        let n = element_count(&shape)
            .and_then(|n| n.checked_mul(4))
            .unwrap_or(usize::MAX);
        let data = c
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(BundleEntry { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(entries)
}

pub fn write_bundle_file(path: &Path, entries: &[BundleEntry]) -> Result<()> {
    std::fs::write(path, write_bundle(entries)?)?;
    Ok(())
}

pub fn read_bundle_file(path: &Path) -> Result<Vec<BundleEntry>> {
    read_bundle(&std::fs::read(path)?)
}

/// Entries keyed by name, widened to f64 tensors.
pub fn bundle_tensors(entries: &[BundleEntry]) -> Result<BTreeMap<String, Tensor>> {
    entries
        .iter()
        .map(|e| Ok((e.name.clone(), e.to_tensor()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> BundleEntry {
        BundleEntry::new("w", vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25]).unwrap()
    }

    #[test]
    fn empty_bundle() {
        let bytes = write_bundle(&[]).unwrap();
        assert_eq!(bytes, b"NIBT\x01\0\0\0\0\0\0\0");
        assert!(read_bundle(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_entry_layout() {
        let bytes = write_bundle(&[two_by_two()]).unwrap();
        assert_eq!(bytes.len(), 12 + 4 + 1 + 2 + 8 + 16);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[17], DTYPE_F32);
        assert_eq!(bytes[18], 2);
        let back = read_bundle(&bytes).unwrap();
        assert!(back[0].bitwise_eq(&two_by_two()));
    }

    #[test]
    fn scalar_and_empty_dims() {
        let entries = vec![
            BundleEntry::new("s", vec![], vec![7.0]).unwrap(),
            BundleEntry::new("e", vec![0, 3], vec![]).unwrap(),
        ];
        let back = read_bundle(&write_bundle(&entries).unwrap()).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let good = write_bundle(&[two_by_two()]).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(read_bundle(&bad).unwrap_err().code(), "bad_magic");

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(read_bundle(&bad).unwrap_err().code(), "version_mismatch");

        let bad = &good[..good.len() - 1];
        assert_eq!(read_bundle(bad).unwrap_err().code(), "truncated_payload");

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(read_bundle(&bad).unwrap_err().code(), "trailing_bytes");

        let mut bad = good.clone();
        bad[17] = 1;
        assert_eq!(read_bundle(&bad).unwrap_err().code(), "unsupported_dtype");

        let mut bad = good.clone();
        bad[16] = 0xff;
        assert_eq!(read_bundle(&bad).unwrap_err().code(), "invalid_name");

        let dup = [two_by_two(), two_by_two()];
        assert_eq!(write_bundle(&dup).unwrap_err().code(), "duplicate_name");
        let mut bytes = write_bundle(&[two_by_two()]).unwrap();
        bytes[8] = 2;
        bytes.extend_from_slice(&good[12..]);
        assert_eq!(read_bundle(&bytes).unwrap_err().code(), "duplicate_name");

        assert_eq!(read_bundle(b"NI").unwrap_err().code(), "truncated_payload");
    }

    #[test]
    fn huge_dims_are_truncation_not_panic() {
        let mut bytes =
            write_bundle(&[BundleEntry::new("x", vec![1, 1], vec![0.0]).unwrap()]).unwrap();
        bytes[19..23].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[23..27].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(read_bundle(&bytes).unwrap_err().code(), "truncated_payload");
    }

    #[test]
    fn entry_shape_is_checked() {
        assert!(BundleEntry::new("x", vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn tensor_widening() {
        let t = Tensor::new(vec![3], vec![0.1, -2.0, 1e-3]).unwrap();
        let e = BundleEntry::from_tensor("t", &t);
        let back = e.to_tensor().unwrap();
        assert_eq!(back.data()[1], -2.0);
        assert_eq!(back.data()[0], f64::from(0.1f32));
        let nan = BundleEntry::new("n", vec![1], vec![f32::NAN]).unwrap();
        assert_eq!(nan.to_tensor().unwrap_err().code(), "non_finite");
    }
}
