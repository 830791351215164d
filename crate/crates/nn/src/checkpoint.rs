//! Versioned binary container for named tensors and counters.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "TSCLCKPT" | u32 version | u32 len + config hash | u32 len + meta JSON
//! | u32 count { u32 len + name | u32 rows | u32 cols | f64 × rows·cols }
//! | u32 count { u32 len + name | u64 value }
//! | 32-byte SHA-256 of everything before it
//! ```

use crate::tensor::Tensor;
use crate::NnError;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"TSCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
    pub counters: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config_hash);
        put_str(&mut b, &self.meta);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.rows as u32).to_le_bytes());
            b.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (name, v) in &self.counters {
            put_str(&mut b, name);
            b.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(NnError::Checkpoint("file too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(NnError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(NnError::Checkpoint("checksum mismatch (file corrupt)".into()));
        }
        let mut r = Reader { b: body, at: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.string()?;
        let meta = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| NnError::Checkpoint("tensor size overflow".into()))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| NnError::Checkpoint("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor { rows, cols, data }));
        }
        let n = r.u32()? as usize;
        let mut counters = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let v = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            counters.push((name, v));
        }
        if r.at != body.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_hash,
            meta,
            tensors,
            counters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            NnError::Checkpoint(m) => NnError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.b.len() - self.at < n {
            return Err(NnError::Checkpoint("truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::Checkpoint("invalid utf-8".into()))
    }
}
