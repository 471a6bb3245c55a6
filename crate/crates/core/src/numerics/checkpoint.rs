//! Binary checkpoint files: a JSON metadata header followed by named tensors.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "DFMRCKPT"
//! version u32      1
//! meta    u64 length + UTF-8 JSON
//! count   u32
//! count × { name: u32 length + UTF-8, rank: u32, dims: rank × u64, data: Π dims × f64 }
//! ```
//!
//! Values are stored as `f64` regardless of the in-memory scalar, so `f64`
//! parameters round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DFMRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter whose name starts with one of `prefixes`.
    pub fn add_params<T: Scalar>(&mut self, store: &ParamStore<T>, prefixes: &[&str]) {
        for (_, p) in store.iter() {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                self.tensors.insert(
                    p.name.clone(),
                    StoredTensor {
                        shape: p.value.shape().to_vec(),
                        data: p.value.to_f64_vec(),
                    },
                );
            }
        }
    }

    /// Copies stored tensors into same-named parameters under `prefixes`.
    ///
    /// Every such parameter must be present with a matching shape. Returns the
    /// number of parameters loaded.
    pub fn load_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        prefixes: &[&str],
    ) -> Result<usize> {
        let targets: Vec<_> = store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in &targets {
            let stored = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let current = store.value(*id);
            if stored.shape != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    stored.shape,
                    current.shape()
                )));
            }
            *store.value_mut(*id) = Tensor::from_f64(&stored.shape, &stored.data)?;
        }
        Ok(targets.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, StoredTensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
