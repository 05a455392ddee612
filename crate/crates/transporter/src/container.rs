//! Single-file tensor container shared by every checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TRNSPRT\0"
//! version    u32
//! kind       u32 length + UTF-8
//! metadata   u32 count, then (u32 length + key, u32 length + value) pairs
//! tensors    u32 count, then per tensor:
//!              u32 length + name, u32 rank, rank x u64 dims,
//!              prod(dims) x f64
//! ```
//!
//! Metadata keys are kept sorted; tensors keep insertion order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use transporter_core::Tensor;

pub const MAGIC: [u8; 8] = *b"TRNSPRT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a checkpoint container (bad magic bytes)")]
    BadMagic,
    #[error("unsupported container version {0} (this build reads {VERSION})")]
    Version(u32),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("container holds invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("tensor `{0}` not found")]
    Missing(String),
    #[error("expected a `{expected}` container, found `{found}`")]
    Kind { expected: String, found: String },
    #[error("metadata key `{0}` not found")]
    MissingMeta(String),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("bad tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.into(),
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str, ContainerError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ContainerError::MissingMeta(key.into()))
    }

    pub fn push(&mut self, name: &str, tensor: &Tensor) -> Result<(), ContainerError> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(ContainerError::Duplicate(name.into()));
        }
        self.tensors.push((name.into(), tensor.detached()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::Missing(name.into()))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::Kind {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let mut c = Container::new(&r.string("kind")?);
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            c.metadata.insert(k, v);
        }
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "tensor dims")?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| ContainerError::Tensor {
                    name: name.clone(),
                    reason: format!("dimension {d} does not fit in memory"),
                })?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ContainerError::Tensor {
                name: name.clone(),
                reason: "element count overflows".into(),
            })?;
            let raw = r.take(len.checked_mul(8).ok_or(ContainerError::Truncated("tensor data"))?, "tensor data")?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| ContainerError::Tensor {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            c.push(&name, &t)?;
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Trailing(bytes.len() - r.pos));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("container fields are limited to u32::MAX entries");
    out.extend_from_slice(&n.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ContainerError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, ContainerError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| ContainerError::Utf8(what))
    }
}
