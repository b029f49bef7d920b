//! The `.vtrl` tensor archive.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic    4 bytes   "VTRL"
//! version  u32       1
//! count    u32       number of entries
//! header   count ×   name_len u32 | name (UTF-8) | dtype u32 |
//!                    ndims u32 | dims ndims × u64 | offset u64
//! payload  entries back to back, in header order
//! ```
//!
//! `dtype` 0 is f64 (8 bytes per element, raw IEEE bits), 1 is UTF-8 text
//! (1 byte per element, `dims = [len]`). `offset` is the absolute file
//! position of the entry's payload; payloads are contiguous and the file ends
//! exactly after the last one.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: &[u8; 4] = b"VTRL";
pub const VERSION: u32 = 1;

const DTYPE_F64: u32 = 0;
const DTYPE_TEXT: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload for `{0}`")]
    TruncatedPayload(String),
    #[error("dims of `{0}` overflow")]
    DimOverflow(String),
    #[error("invalid dims {dims:?} for `{name}`")]
    InvalidDims { name: String, dims: Vec<u64> },
    #[error("entry name is not UTF-8")]
    InvalidName,
    #[error("text entry `{0}` is not UTF-8")]
    InvalidText(String),
    #[error("unknown dtype {dtype} for `{name}`")]
    UnknownDtype { name: String, dtype: u32 },
    #[error("payload offset of `{name}` is {found}, expected {expected}")]
    BadOffset { name: String, expected: u64, found: u64 },
    #[error("{0} trailing bytes after last payload")]
    TrailingBytes(u64),
    #[error("duplicate entry `{0}`")]
    DuplicateName(String),
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("entry `{0}` has the wrong dtype")]
    WrongType(String),
    #[error("unexpected entry `{0}`")]
    Unexpected(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("bad embedded config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

/// Ordered, uniquely named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<Entry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Payload) -> std::result::Result<(), ArchiveError> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.entries.push(Entry { name, payload });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> std::result::Result<(), ArchiveError> {
        let clean = Tensor::new(t.dims().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(name, Payload::F64(clean))
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) -> std::result::Result<(), ArchiveError> {
        self.push(name, Payload::Text(text.into()))
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.payload)
    }

    pub fn tensor(&self, name: &str) -> std::result::Result<&Tensor, ArchiveError> {
        match self.get(name) {
            Some(Payload::F64(t)) => Ok(t),
            Some(Payload::Text(_)) => Err(ArchiveError::WrongType(name.into())),
            None => Err(ArchiveError::Missing(name.into())),
        }
    }

    pub fn text(&self, name: &str) -> std::result::Result<&str, ArchiveError> {
        match self.get(name) {
            Some(Payload::Text(s)) => Ok(s),
            Some(Payload::F64(_)) => Err(ArchiveError::WrongType(name.into())),
            None => Err(ArchiveError::Missing(name.into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        let mut header_len = 12u64;
        for e in &self.entries {
            let ndims = match &e.payload {
                Payload::F64(t) => t.dims().len(),
                Payload::Text(_) => 1,
            };
            header_len += 4 + e.name.len() as u64 + 4 + 4 + 8 * ndims as u64 + 8;
        }
        let mut offset = header_len;
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut body = Vec::new();
        for e in &self.entries {
            header.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            header.extend_from_slice(e.name.as_bytes());
            let (dtype, dims, bytes): (u32, Vec<u64>, Vec<u8>) = match &e.payload {
                Payload::F64(t) => (
                    DTYPE_F64,
                    t.dims().iter().map(|&d| d as u64).collect(),
                    t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                ),
                Payload::Text(s) => (DTYPE_TEXT, vec![s.len() as u64], s.as_bytes().to_vec()),
            };
            header.extend_from_slice(&dtype.to_le_bytes());
            header.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in &dims {
                header.extend_from_slice(&d.to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            offset += bytes.len() as u64;
            body.extend_from_slice(&bytes);
        }
        debug_assert_eq!(header.len() as u64, header_len);
        header.extend_from_slice(&body);
        header
    }

    /// Parses an archive, validating every length against the input before
    /// allocating for it.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ArchiveError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| ArchiveError::BadMagic)? != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        // Each record takes at least 24 bytes, which bounds `count`.
        if count > r.remaining() / 24 {
            return Err(ArchiveError::TruncatedHeader);
        }

        struct Record {
            name: String,
            dtype: u32,
            dims: Vec<u64>,
            offset: u64,
        }
        let mut records = Vec::with_capacity(count);
        let mut seen = HashSet::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ArchiveError::InvalidName)?
                .to_owned();
            let dtype = r.u32()?;
            let ndims = r.u32()? as usize;
            if ndims > r.remaining() / 8 {
                return Err(ArchiveError::TruncatedHeader);
            }
            let dims = (0..ndims).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()?;
            if !seen.insert(name.clone()) {
                return Err(ArchiveError::DuplicateName(name));
            }
            records.push(Record { name, dtype, dims, offset });
        }

        let total = bytes.len() as u64;
        let mut expected = r.pos as u64;
        let mut entries = Vec::with_capacity(count);
        for rec in records {
            let elem = match rec.dtype {
                DTYPE_F64 => 8u64,
                DTYPE_TEXT => 1u64,
                dtype => return Err(ArchiveError::UnknownDtype { name: rec.name, dtype }),
            };
            if rec.offset != expected {
                return Err(ArchiveError::BadOffset {
                    name: rec.name,
                    expected,
                    found: rec.offset,
                });
            }
            let len = rec
                .dims
                .iter()
                .try_fold(elem, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ArchiveError::DimOverflow(rec.name.clone()))?;
            let end = rec
                .offset
                .checked_add(len)
                .ok_or_else(|| ArchiveError::DimOverflow(rec.name.clone()))?;
            if end > total {
                return Err(ArchiveError::TruncatedPayload(rec.name));
            }
            let raw = &bytes[rec.offset as usize..end as usize];
            let payload = match rec.dtype {
                DTYPE_F64 => {
                    let dims: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
                    if dims.contains(&0) || checked_numel(&dims).is_none() {
                        return Err(ArchiveError::InvalidDims { name: rec.name, dims: rec.dims });
                    }
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Payload::F64(Tensor::new(dims, data).expect("validated dims"))
                }
                _ => {
                    if rec.dims.len() != 1 {
                        return Err(ArchiveError::InvalidDims { name: rec.name, dims: rec.dims });
                    }
                    let s = std::str::from_utf8(raw).map_err(|_| ArchiveError::InvalidText(rec.name.clone()))?;
                    Payload::Text(s.to_owned())
                }
            };
            entries.push(Entry { name: rec.name, payload });
            expected = end;
        }
        if expected != total {
            return Err(ArchiveError::TrailingBytes(total - expected));
        }
        Ok(TensorArchive { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ArchiveError> {
        if n > self.remaining() {
            return Err(ArchiveError::TruncatedHeader);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_archive(archive: &TensorArchive, path: &Path) -> Result<()> {
    write_atomic(path, &archive.to_bytes())
}

pub fn load_archive(path: &Path) -> Result<TensorArchive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(TensorArchive::from_bytes(&bytes)?)
}

/// Writes via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push_tensor("w", &Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        a.push_text("meta", "k = 1").unwrap();
        a.push_tensor("b", &Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let b = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a.len(), b.len());
        let (x, y) = (a.tensor("w").unwrap(), b.tensor("w").unwrap());
        for (p, q) in x.data().iter().zip(y.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        assert_eq!(b.text("meta").unwrap(), "k = 1");
        let names: Vec<_> = b.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["w", "meta", "b"]);
    }

    #[test]
    fn layout_starts_with_magic_version_count() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"VTRL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn empty_archive() {
        let bytes = TensorArchive::new().to_bytes();
        assert_eq!(bytes.len(), 12);
        assert!(TensorArchive::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = TensorArchive::new();
        a.push_text("x", "").unwrap();
        assert_eq!(a.push_text("x", ""), Err(ArchiveError::DuplicateName("x".into())));
    }

    #[test]
    fn distinct_parse_errors() {
        let mut bytes = sample().to_bytes();
        assert_eq!(TensorArchive::from_bytes(b"VTR"), Err(ArchiveError::BadMagic));
        bytes[0] = b'X';
        assert_eq!(TensorArchive::from_bytes(&bytes), Err(ArchiveError::BadMagic));

        let good = sample().to_bytes();
        let cut = &good[..good.len() - 3];
        assert!(matches!(TensorArchive::from_bytes(cut), Err(ArchiveError::TruncatedPayload(_))));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert_eq!(TensorArchive::from_bytes(&v2), Err(ArchiveError::UnsupportedVersion(2)));

        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(TensorArchive::from_bytes(&extra), Err(ArchiveError::TrailingBytes(1)));

        // first entry "w": dims start after magic/version/count, name_len, name, dtype, ndims
        let mut huge = good.clone();
        let dims_at = 12 + 4 + 1 + 4 + 4;
        huge[dims_at..dims_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(TensorArchive::from_bytes(&huge), Err(ArchiveError::DimOverflow("w".into())));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vtrl");
        save_archive(&sample(), &p).unwrap();
        assert_eq!(load_archive(&p).unwrap(), sample());
    }
}
