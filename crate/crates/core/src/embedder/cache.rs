//! Content-addressed on-disk vector cache.
//!
//! File layout (little-endian): magic `E11V`, version `u32`, dim `u32`,
//! count `u64`, then `count` records of a 32-byte SHA-256 key followed by
//! `dim` `f32` values. Records are written in ascending key order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"E11V";
pub const VERSION: u32 = 1;

pub type CacheKey = [u8; 32];

/// SHA-256 of the NFC-normalized UTF-8 text.
pub fn content_key(text: &str) -> CacheKey {
    let nfc: String = text.nfc().collect();
    Sha256::digest(nfc.as_bytes()).into()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorCache {
    dim: usize,
    entries: BTreeMap<CacheKey, Vec<f32>>,
}

impl VectorCache {
    pub fn new(dim: usize) -> Self {
        VectorCache { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn get_text(&self, text: &str) -> Option<&[f32]> {
        self.get(&content_key(text))
    }

    pub fn insert(&mut self, key: CacheKey, vector: Vec<f32>) -> Result<()> {
        if self.entries.is_empty() && self.dim == 0 {
            self.dim = vector.len();
        }
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: vector.len() });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in cached vector".into()));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn insert_text(&mut self, text: &str, vector: Vec<f32>) -> Result<()> {
        self.insert(content_key(text), vector)
    }

    /// Entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&CacheKey, &[f32])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::InvalidInput("dim too large".into()))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (key, v) in &self.entries {
            w.write_all(key)?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("vector cache: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut cache = VectorCache::new(dim);
        let mut rec = vec![0u8; dim * 4];
        for _ in 0..count {
            let mut key = [0u8; 32];
            r.read_exact(&mut key)?;
            r.read_exact(&mut rec)?;
            let v = rec.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            cache.insert(key, v)?;
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Writes the cache via temp file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.entries.len() * (32 + 4 * self.dim));
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nfc_equivalent_texts_share_a_key() {
        // precomposed vs combining acute
        assert_eq!(content_key("caf\u{e9}"), content_key("cafe\u{301}"));
        assert_ne!(content_key("cafe"), content_key("café"));
    }

    #[test]
    fn header_layout() {
        let mut c = VectorCache::new(2);
        c.insert_text("a", vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"E11V");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 1);
        assert_eq!(&buf[20..52], &content_key("a"));
        assert_eq!(f32::from_le_bytes(buf[52..56].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(buf[56..60].try_into().unwrap()), -2.0);
        assert_eq!(buf.len(), 60);
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.e11v");
        let mut c = VectorCache::new(3);
        c.insert_text("x", vec![0.1, 0.2, 0.3]).unwrap();
        c.insert_text("y", vec![-0.1, 0.0, 9.0]).unwrap();
        c.save(&path).unwrap();
        assert_eq!(VectorCache::load(&path).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = VectorCache::new(3);
        assert!(c.insert_text("x", vec![0.0; 2]).is_err());
        assert!(c.insert_text("x", vec![f32::NAN; 3]).is_err());
        assert!(VectorCache::read_from(&b"NOPE\x01\0\0\0"[..]).is_err());
    }
}
