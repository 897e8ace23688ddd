//! Little-endian framing shared by the model files, plus the lineage block
//! every artifact carries.

use std::fs;
use std::path::{Path, PathBuf};

use crate::concept_pool::PoolFingerprint;
use crate::embedding_store::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Where an artifact came from: the pool it was trained on, the pipeline
/// config hash, and the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lineage {
    pub pool_fingerprint: PoolFingerprint,
    pub config_hash: [u8; 32],
    pub seed: u64,
}

impl Lineage {
    pub fn new(pool_fingerprint: PoolFingerprint, config_hash: [u8; 32], seed: u64) -> Self {
        Lineage {
            pool_fingerprint,
            config_hash,
            seed,
        }
    }

    /// Lineage for in-memory use where no config file exists.
    pub fn detached(pool_fingerprint: PoolFingerprint, seed: u64) -> Self {
        Self::new(pool_fingerprint, [0; 32], seed)
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn magic(&mut self, magic: &[u8; 4], version: u32) {
        self.buf.extend_from_slice(magic);
        self.u32(version);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Payload only; the shape is written by the caller.
    pub fn f32s(&mut self, m: &Matrix) {
        for v in m.as_slice() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        self.f32s(m);
    }

    pub fn lineage(&mut self, l: &Lineage) {
        self.bytes(&l.pool_fingerprint.0);
        self.bytes(&l.config_hash);
        self.u64(l.seed);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &Path) -> Self {
        ByteReader {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::format(&self.path, offset as u64, msg)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(self.buf.len(), format!("truncated, needed {n} more bytes")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.take(4).ok() != Some(&magic[..]) {
            return Err(self.err(0, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        let got = self.u32()?;
        if got != version {
            return Err(self.err(4, format!("unsupported version {got}")));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        usize::try_from(self.u64()?).map_err(|_| self.err(at, "size overflows usize"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn array32(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn f32s(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let at = self.pos;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.err(at, "dimensions overflow"))?;
        let raw = self.take(n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(self.err(at + 4 * i, "non-finite parameter"));
        }
        Matrix::new(rows, cols, data)
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        self.f32s(rows, cols)
    }

    pub fn lineage(&mut self) -> Result<Lineage> {
        let pool_fingerprint = PoolFingerprint(self.array32()?);
        let config_hash = self.array32()?;
        let seed = self.u64()?;
        Ok(Lineage::new(pool_fingerprint, config_hash, seed))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
