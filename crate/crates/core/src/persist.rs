//! Binary model container shared by the generator and the baselines.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic: [u8; 4] | version: u32 | payload_len: u64 | payload | crc64(payload): u64
//! payload = section*
//! section = tag: u32 | len: u64 | bytes
//! ```

use std::fs;
use std::io;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

use crate::matrix::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a model file: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("file is truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed section: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, PersistError>;

/// Accumulates tagged sections and serializes them into a container.
#[derive(Default)]
pub struct ContainerWriter {
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, tag: u32, body: SectionWriter) -> &mut Self {
        self.payload.extend_from_slice(&tag.to_le_bytes());
        self.payload
            .extend_from_slice(&(body.buf.len() as u64).to_le_bytes());
        self.payload.extend_from_slice(&body.buf);
        self
    }

    pub fn finish(&self, magic: [u8; 4]) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 8);
        out.extend_from_slice(&magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&CHECKSUM.checksum(&self.payload).to_le_bytes());
        out
    }
}

/// Primitive encoder for a single section body.
#[derive(Default)]
pub struct SectionWriter {
    buf: Vec<u8>,
}

impl SectionWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
        self
    }

    pub fn u32s(&mut self, v: &[u32]) -> &mut Self {
        self.u64(v.len() as u64);
        for &x in v {
            self.u32(x);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn matrix(&mut self, m: &DenseMatrix) -> &mut Self {
        self.u64(m.rows() as u64).u64(m.cols() as u64);
        for &x in m.as_slice() {
            self.f64(x);
        }
        self
    }

    pub fn take(&mut self) -> Self {
        std::mem::take(self)
    }
}

/// Verifies the header and checksum, then splits the payload into sections.
pub fn open_container(bytes: &[u8], magic: [u8; 4]) -> Result<Vec<(u32, &[u8])>> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(PersistError::BadMagic {
            expected: magic,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(PersistError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(PersistError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let needed = usize::try_from(payload_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN + 8))
        .ok_or_else(|| PersistError::Malformed(format!("payload length {payload_len}")))?;
    if bytes.len() < needed {
        return Err(PersistError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(PersistError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - needed
        )));
    }
    let payload = &bytes[HEADER_LEN..needed - 8];
    let stored = u64::from_le_bytes(bytes[needed - 8..].try_into().unwrap());
    let computed = CHECKSUM.checksum(payload);
    if stored != computed {
        return Err(PersistError::Checksum { stored, computed });
    }

    let mut sections = Vec::new();
    let mut r = SectionReader::new(payload);
    while !r.is_empty() {
        let tag = r.u32()?;
        let len = r.len()?;
        sections.push((tag, r.bytes(len)?));
    }
    Ok(sections)
}

/// Finds the unique section with `tag`.
pub fn section<'a>(sections: &[(u32, &'a [u8])], tag: u32) -> Result<SectionReader<'a>> {
    let mut found = sections.iter().filter(|(t, _)| *t == tag);
    match (found.next(), found.next()) {
        (Some((_, body)), None) => Ok(SectionReader::new(body)),
        (None, _) => Err(PersistError::Malformed(format!("missing section {tag}"))),
        _ => Err(PersistError::Malformed(format!("duplicate section {tag}"))),
    }
}

/// Cursor over a section body.
pub struct SectionReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> SectionReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    /// Errors unless the whole body was consumed.
    pub fn end(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(PersistError::Malformed(format!(
                "{} unread bytes in section",
                self.buf.len() - self.pos
            )))
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PersistError::Malformed(format!("section overrun reading {n} bytes")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// A `u64` length that must fit in the remaining bytes when each element
    /// takes at least one byte.
    pub fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| PersistError::Malformed(format!("length {n} exceeds section")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| PersistError::Malformed(format!("value {n} too large")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.array()?)))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len()?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|e| PersistError::Malformed(e.to_string()))
    }

    pub fn matrix(&mut self) -> Result<DenseMatrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let count = rows
            .checked_mul(cols)
            .filter(|&c| c.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| {
                PersistError::Malformed(format!("matrix {rows}×{cols} exceeds section"))
            })?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_vec(rows, cols, data).map_err(|e| PersistError::Malformed(e.to_string()))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}
