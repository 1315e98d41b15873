//! Versioned binary checkpoints: magic, JSON config echo, little-endian
//! sections, SHA-256 trailer over everything before it.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tape::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], config: &impl Serialize) -> Result<Writer> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        let json = serde_json::to_vec(config)?;
        w.u64(json.len() as u64);
        w.buf.extend_from_slice(&json);
        Ok(w)
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

    pub fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn params(&mut self, store: &ParamStore<f32>) {
        self.u64(store.len() as u64);
        for e in store.entries() {
            self.str(&e.name);
            self.u32(e.value.rank() as u32);
            for &d in e.value.shape() {
                self.u64(d as u64);
            }
            self.f32s(e.value.data());
        }
    }

    /// Appends the digest and returns the file bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<String> {
        let bytes = self.finish();
        let hash = hex::encode(Sha256::digest(&bytes));
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hash)
    }
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and trailer; returns the reader and the decoded config echo.
    pub fn open<C: DeserializeOwned>(path: &'a Path, bytes: &'a [u8], magic: &[u8; 8]) -> Result<(Reader<'a>, C)> {
        let bad = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != magic {
            return Err(bad("bad magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { path, data: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let json = r.take(n)?;
        let config = serde_json::from_slice(json).map_err(|e| bad(&format!("config: {e}")))?;
        Ok((r, config))
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| self.corrupt("truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
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

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    /// Overwrites `store` values in order; names and shapes must match.
    pub fn params_into(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        let n = self.u64()? as usize;
        if n != store.len() {
            return Err(self.corrupt(format!("expected {} parameters, found {n}", store.len())));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = self.str()?;
            if name != store.name(id) {
                return Err(self.corrupt(format!("parameter `{name}` where `{}` was expected", store.name(id))));
            }
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != store.get(id).shape() {
                return Err(self.corrupt(format!("shape mismatch for `{name}`")));
            }
            let data = self.f32s()?;
            if data.len() != store.get(id).len() || data.iter().any(|v| !v.is_finite()) {
                return Err(self.corrupt(format!("bad data for `{name}`")));
            }
            store.set(id, Tensor::new(&shape, data));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

/// SHA-256 of a file's bytes, for report provenance.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
