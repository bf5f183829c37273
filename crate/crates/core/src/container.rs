//! Binary container for named `f32` arrays plus a text manifest.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "HZBCKPT\0"
//! version      u32       1
//! manifest_len u32       byte length M
//! manifest     M bytes   UTF-8, one `key = value` line per entry, keys sorted
//! array_count  u32       K
//! K times:
//!   name_len   u32       byte length L
//!   name       L bytes   UTF-8
//!   rank       u32       R
//!   dims       R × u32
//!   payload    ∏dims × f32
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HZBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub manifest: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("manifest has no `{key}` entry")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Integrity(format!("manifest entry `{key}` = `{raw}` is malformed")))
    }

    /// Stores every tensor of `params` under `prefix/`.
    pub fn put_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.arrays.insert(format!("{prefix}/{name}"), t.cast());
        }
    }

    /// Collects every array stored under `prefix/`.
    pub fn take_params<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let lead = format!("{prefix}/");
        let mut set = ParamSet::new();
        for (name, t) in self.arrays.range(lead.clone()..) {
            let Some(rest) = name.strip_prefix(&lead) else { break };
            set.insert(rest, t.cast());
        }
        if set.is_empty() {
            return Err(Error::Integrity(format!("no arrays stored under `{prefix}`")));
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.manifest {
            if k.contains(['\n', '=']) || v.contains('\n') || k.trim() != k {
                return Err(Error::Config(format!("manifest entry `{k}` cannot be encoded")));
            }
            text.push_str(k);
            text.push_str(" = ");
            text.push_str(v);
            text.push('\n');
        }
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.arrays.len())?;
        for (name, t) in &self.arrays {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Integrity("file too short to be a checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported container version {version}")));
        }
        let m_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(m_len)?)
            .map_err(|_| Error::Integrity("manifest is not UTF-8".into()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Integrity(format!("malformed manifest line `{line}`")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let n_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n_len)?)
                .map_err(|_| Error::Integrity("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.insert(name, Tensor::new(&dims, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after last array".into()));
        }
        Ok(Self { manifest, arrays })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed save never leaves a truncated file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit the container's u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set("seed", 7);
        c.set("config.width", 8);
        c.arrays.insert("g/conv.weight".into(), Tensor::new(&[2, 1, 1, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        c.arrays.insert("g/conv.bias".into(), Tensor::new(&[2], vec![0.1, 0.2]).unwrap());
        c
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [1, 10, bytes.len() / 2] {
            let err = Container::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)), "{err}");
        }
    }

    #[test]
    fn params_by_prefix() {
        let c = sample();
        let p: ParamSet<f64> = c.take_params("g").unwrap();
        assert_eq!(p.len(), 2);
        assert!(c.take_params::<f64>("d").is_err());
    }
}
