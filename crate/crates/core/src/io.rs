//! Binary container helpers shared by the corpus, tokenizer, checkpoint and
//! token-grid files.
//!
//! Every container starts with an 8-byte magic, a little-endian `u32`
//! version and a length-prefixed JSON manifest. Blobs follow, each with an
//! explicit shape prefix (`u64` rank, then `u64` per dimension) and
//! little-endian element data.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Write-temp-then-rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn json<T: serde::Serialize>(&mut self, v: &T) -> Result<()> {
        let bytes = serde_json::to_vec(v)?;
        self.u64(bytes.len() as u64);
        self.buf.extend_from_slice(&bytes);
        Ok(())
    }

    pub fn f32_blob(&mut self, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.shape(shape);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u32_blob(&mut self, shape: &[usize], data: &[u32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.shape(shape);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn shape(&mut self, shape: &[usize]) {
        self.u64(shape.len() as u64);
        for &d in shape {
            self.u64(d as u64);
        }
    }
}

/// Cursor over a container. Errors carry the record index that was being
/// decoded so truncated files name the failing record.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    pub record: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            record: 0,
        };
        let m = r.take(8)?;
        if m != magic {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        Ok(r)
    }

    pub fn err(&self, detail: &str) -> Error {
        Error::Parse {
            record: self.record,
            detail: format!("{detail} (byte offset {})", self.pos),
        }
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(&format!("truncated: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        serde_json::from_slice(bytes).map_err(|e| self.err(&format!("bad json: {e}")))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(self.err(&format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u64()? as usize)).collect()
    }

    pub fn f32_blob(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("overflow"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }

    pub fn u32_blob(&mut self) -> Result<(Vec<usize>, Vec<u32>)> {
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("overflow"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip_and_truncation() {
        let mut w = Writer::new(b"TESTFILE");
        w.json(&serde_json::json!({"a": 1})).unwrap();
        w.f32_blob(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        w.u32_blob(&[3], &[7, 8, 9]);
        let bytes = w.buf;
        let mut r = Reader::new(&bytes, b"TESTFILE").unwrap();
        let v: serde_json::Value = r.json().unwrap();
        assert_eq!(v["a"], 1);
        let (s, d) = r.f32_blob().unwrap();
        assert_eq!(s, vec![2, 3]);
        assert_eq!(d[5], -6.5);
        assert_eq!(r.u32_blob().unwrap().1, vec![7, 8, 9]);
        assert!(r.at_end());

        let cut = &bytes[..bytes.len() - 3];
        let mut r = Reader::new(cut, b"TESTFILE").unwrap();
        r.json::<serde_json::Value>().unwrap();
        r.f32_blob().unwrap();
        assert!(matches!(r.u32_blob(), Err(Error::Parse { .. })));
        assert!(Reader::new(&bytes, b"OTHERMAG").is_err());
    }
}
