//! Binary checkpoint container shared by every trained artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "GLNACKPT"
//! format       u32      container version (currently 1)
//! kind         u16 len + UTF-8   artifact kind, e.g. "gesture-tokenizer"
//! kind_version u32      version of the artifact's own layout
//! dtype        u8       1 = f32, 2 = f64
//! config       u32 len + UTF-8   "key=value" lines, order preserved
//! count        u32      number of tensors
//! tensor*      u16 len + UTF-8 name, u8 ndim, ndim × u32 dims, data
//! ```

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"GLNACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("dtype mismatch: expected tag {expected}, found {found}")]
    DtypeMismatch { expected: u8, found: u8 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub kind_version: u32,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, kind_version: u32) -> Self {
        Self {
            kind: kind.into(),
            kind_version,
            config: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        if let Some(slot) = self.config.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.config.push((key, value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parse a config value, failing with [`CheckpointError::Malformed`].
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, CheckpointError> {
        let raw = self
            .get(key)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing config key {key}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad value for {key}: {raw}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str16(&mut out, &self.kind);
        out.extend_from_slice(&self.kind_version.to_le_bytes());
        out.push(T::DTYPE_TAG);
        let cfg: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str16(&mut out, name);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: format,
            });
        }
        let kind = r.str16()?;
        let kind_version = r.u32()?;
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE_TAG {
            return Err(CheckpointError::DtypeMismatch {
                expected: T::DTYPE_TAG,
                found: dtype,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in cfg.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("bad config line {line}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str16()?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(T::BYTES).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            kind_version,
            config,
            tensors,
        })
    }

    /// Load and check the artifact kind and its layout version.
    pub fn load_expect(path: &Path, kind: &str, kind_version: u32) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.kind != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind.into(),
                found: ck.kind,
            });
        }
        if ck.kind_version != kind_version {
            return Err(CheckpointError::VersionMismatch {
                expected: kind_version,
                found: ck.kind_version,
            });
        }
        Ok(ck)
    }

    /// Write via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }
}

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn write_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String, CheckpointError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut ck = Checkpoint::new("test-kind", 3);
        ck.set("levels", 4);
        ck.set("name", "abc");
        ck.push_tensor("a", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]));
        ck.push_tensor("b", Tensor::new(vec![1], vec![f32::MAX]));
        ck
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn dtype_is_checked() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }
}
