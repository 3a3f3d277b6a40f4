//! Versioned binary container for named tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SKCT" | version u32 | kind: u32 len + utf8 | metadata: u64 len + json
//! | tensor count u32 | per tensor: name (u32 len + utf8), rank u32,
//!   dims u64 * rank, data f64 * numel
//! | sha256 of everything above (32 bytes)
//! ```
//!
//! Values are stored as raw `f64` bits so a reload is bit-exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SKCT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn push_tensors(&mut self, prefix: &str, tensors: &[Tensor]) {
        for (i, t) in tensors.iter().enumerate() {
            self.tensors.push((format!("{prefix}/{i}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every slot of `params` from `prefix/<name>` entries.
    pub fn fill_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for i in 0..params.len() {
            let key = format!("{prefix}/{}", params.name(i));
            let t = self
                .get(&key)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != params.get(i).shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    params.get(i).shape()
                )));
            }
            *params.get_mut(i) = t.clone();
        }
        Ok(())
    }

    pub fn read_tensors(&self, prefix: &str, like: &[Tensor]) -> Result<Vec<Tensor>> {
        like.iter()
            .enumerate()
            .map(|(i, proto)| {
                let key = format!("{prefix}/{i}");
                match self.get(&key) {
                    Some(t) if t.shape() == proto.shape() => Ok(t.clone()),
                    Some(_) => Err(Error::CorruptCheckpoint(format!("shape mismatch for `{key}`"))),
                    None => Err(Error::CorruptCheckpoint(format!("missing tensor `{key}`"))),
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.kind);
        let meta = serde_json::to_vec(&self.metadata).expect("json value serialises");
        b.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        b.extend_from_slice(&meta);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 32 {
            return Err("file too short".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader(body);
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = r.string()?;
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| e.to_string())?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or("size overflow")?;
            let raw = r.take(numel.checked_mul(8).ok_or("size overflow")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
        }
        if !r.0.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_bytes(&bytes)
            .map_err(|r| Error::CorruptCheckpoint(format!("{}: {}", path.display(), r)))?;
        if c.kind != expected_kind {
            return Err(Error::CorruptCheckpoint(format!(
                "{}: expected a `{}` file, found `{}`",
                path.display(),
                expected_kind,
                c.kind
            )));
        }
        Ok(c)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.0.len() < n {
            return Err("truncated".into());
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"iter": 3, "ema": 0.1}));
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 + 1e-300));
        p.push("b", Tensor::scalar(-0.0));
        c.push_params("net", &p);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut p = ParamSet::new();
        p.push("w", Tensor::zeros(&[2, 3]));
        p.push("b", Tensor::scalar(1.0));
        back.fill_params("net", &mut p).unwrap();
        assert!(p.get(1).item().is_sign_negative());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(Container::from_bytes(&bytes).unwrap_err().contains("checksum"));
        assert!(Container::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn fill_params_checks_shapes() {
        let c = sample();
        let mut p = ParamSet::new();
        p.push("w", Tensor::zeros(&[3, 2]));
        assert!(c.fill_params("net", &mut p).is_err());
    }
}
