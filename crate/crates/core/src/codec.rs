//! Checksummed binary container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 8     | magic                                   |
//! | 4     | format version (u32)                    |
//! | 8     | payload length (u64)                    |
//! | n     | payload                                 |
//! | 32    | SHA-256 of everything before this field |
//!
//! `f64` values are stored as their raw IEEE-754 bits, so round-trips are
//! exact.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

pub fn frame(magic: &[u8; 8], version: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Verify a container and return its payload. Integrity is checked before
/// the version, so a damaged file always reports a checksum error.
pub fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 8], supported: u32, what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < HEADER + DIGEST {
        return Err(Error::Checksum(format!(
            "{} is truncated ({} bytes)",
            what,
            bytes.len()
        )));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!("{} has the wrong magic bytes", what)));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_end = HEADER.checked_add(len).filter(|&e| e + DIGEST == bytes.len());
    let Some(body_end) = body_end else {
        return Err(Error::Checksum(format!(
            "{} length field says {} payload bytes, file holds {}",
            what,
            len,
            bytes.len().saturating_sub(HEADER + DIGEST)
        )));
    };
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(Error::Checksum(format!("{} digest does not match its contents", what)));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != supported {
        return Err(Error::UnsupportedVersion {
            what,
            found: version,
            supported,
        });
    }
    Ok(&bytes[HEADER..body_end])
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("payload ends early at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length does not fit in memory".into()))
    }

    /// A length that must leave at least `unit * len` bytes unread.
    pub fn len_of(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit.max(1)) > self.remaining() {
            return Err(Error::Format(format!("length {} exceeds the remaining payload", n)));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.remaining() {
            return Err(Error::Format(format!("{} values exceed the remaining payload", n)));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_of(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing payload bytes", self.remaining())));
        }
        Ok(())
    }
}
