//! Versioned binary container shared by checkpoints and matrix caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   b"LARARCKP" (checkpoint) or b"LARARMAT" (matrix cache)
//! version      u32       currently 1
//! sections     u32       number of sections that follow
//! section*     [u8; 4] tag, u64 payload length, payload bytes
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Tensors inside payloads are `u64 rows, u64 cols` followed by `rows * cols`
//! `f64` values.

use std::path::Path;

use larar_autodiff::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{LararError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LARARCKP";
pub const MATRIX_MAGIC: [u8; 8] = *b"LARARMAT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, tag: &[u8; 4], payload: Vec<u8>) {
        self.sections.push((*tag, payload));
    }

    pub fn section(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: &[u8; 4]) -> Result<&[u8]> {
        self.section(tag).ok_or_else(|| {
            LararError::CorruptFile(format!("missing section {}", String::from_utf8_lossy(tag)))
        })
    }

    pub fn to_bytes(&self, magic: [u8; 8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 4 + 32 {
            return Err(LararError::CorruptFile("file is truncated".into()));
        }
        if bytes[..8] != magic {
            return Err(LararError::CorruptFile("bad magic bytes".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(LararError::CorruptFile("checksum mismatch".into()));
        }
        let mut r = Reader::new(&body[8..]);
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(LararError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("length 4");
            let len = r.u64()? as usize;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        if !r.is_empty() {
            return Err(LararError::CorruptFile("trailing bytes after sections".into()));
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: &Path, magic: [u8; 8]) -> Result<()> {
        std::fs::write(path, self.to_bytes(magic)).map_err(|e| LararError::io(path, e))
    }

    pub fn read(path: &Path, magic: [u8; 8]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LararError::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.u64(t.rows() as u64).u64(t.cols() as u64);
        for &v in t.data() {
            self.f64(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| LararError::CorruptFile("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| LararError::CorruptFile("tensor larger than payload".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(rows, cols, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        let mut w = Writer::new();
        w.tensor(&Tensor::from_rows(&[[1.0, -0.0], [f64::MIN_POSITIVE, 3.5]]).unwrap());
        c.push(b"TEST", w.finish());
        c.push(b"EMPT", Vec::new());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes(CHECKPOINT_MAGIC);
        let back = Container::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap();
        assert_eq!(back, c);
        let t = Reader::new(back.section(b"TEST").unwrap()).tensor().unwrap();
        assert_eq!(t.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn flipped_magic_is_corrupt() {
        let mut bytes = sample().to_bytes(CHECKPOINT_MAGIC);
        bytes[0] ^= 0xff;
        assert!(matches!(
            Container::from_bytes(&bytes, CHECKPOINT_MAGIC),
            Err(LararError::CorruptFile(_))
        ));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = sample().to_bytes(CHECKPOINT_MAGIC);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            Container::from_bytes(&bytes, CHECKPOINT_MAGIC),
            Err(LararError::CorruptFile(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut body = sample().to_bytes(CHECKPOINT_MAGIC);
        body.truncate(body.len() - 32);
        body[8..12].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(
            Container::from_bytes(&body, CHECKPOINT_MAGIC),
            Err(LararError::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn wrong_container_family_is_rejected() {
        let bytes = sample().to_bytes(MATRIX_MAGIC);
        assert!(Container::from_bytes(&bytes, CHECKPOINT_MAGIC).is_err());
    }
}
