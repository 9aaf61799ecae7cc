//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MXGNCKPT" | version u32 | config hash [32]u8
//! config text: len u32, UTF-8 bytes
//! tensor count u32, then per tensor:
//!   name len u32, name, rank u32, extents u64 × rank, payload f64 × numel
//! ```

use std::fs;
use std::path::Path;

use mixergan_core::Tensor;

use crate::error::{io_err, AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"MXGNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Resolved run configuration in key = value form.
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> AppResult<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            r.pos = 0;
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            r.pos -= 4;
            return Err(r.fail(format!("unsupported checkpoint version {}", version)));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| r.fail("tensor too large"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after the last tensor"));
        }
        Ok(Self { config_hash, config_text, tensors })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> AppError {
        AppError::Parse { path: self.path.to_path_buf(), offset: self.pos, message: message.into() }
    }

    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {} more bytes, {} left", n, self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> AppResult<String> {
        let len = self.u32()? as usize;
        let start = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            self.pos = start;
            self.fail("invalid UTF-8")
        })
    }
}
