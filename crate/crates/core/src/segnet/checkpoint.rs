//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"STVMCKPT"  u32 version
//! u64 metadata length, metadata as UTF-8 JSON
//! u32 array count, then per array:
//!     u32 name length, name bytes
//!     u32 rank, u64 × rank dims
//!     f32 × product(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{ArchConfig, NetworkParams, ParamEntry, ParamGroup};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STVMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn push_params(&mut self, prefix: &str, params: &NetworkParams<f32>) {
        for e in params.entries() {
            self.push(
                format!("{prefix}{}", e.name),
                e.value.shape().to_vec(),
                e.value.iter().copied().collect(),
            );
        }
    }

    /// Reads back every array whose name starts with `prefix`, in archive order.
    pub fn params(&self, prefix: &str) -> Result<NetworkParams<f32>> {
        let mut entries = Vec::new();
        for a in self.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
            let name = &a.name[prefix.len()..];
            let group = name
                .split('.')
                .next()
                .and_then(ParamGroup::parse)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group in `{name}`")))?;
            let value = ArrayD::from_shape_vec(IxDyn(&a.shape), a.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            entries.push(ParamEntry {
                name: name.to_string(),
                group,
                value,
            });
        }
        Ok(NetworkParams::new(entries))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata).map_err(std::io::Error::other)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u32).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &d in &a.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(a.data.len() * 4);
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = take(&mut r, meta_len)?;
        let metadata: serde_json::Value =
            serde_json::from_slice(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated archive".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let b = take(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

/// Metadata record of a standalone network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub kind: String,
    pub arch: ArchConfig,
    pub seed: u64,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCheckpoint {
    pub meta: NetworkMeta,
    pub params: NetworkParams<f32>,
}

impl NetworkCheckpoint {
    pub fn new(arch: ArchConfig, seed: u64, iteration: u64, params: NetworkParams<f32>) -> Self {
        Self {
            meta: NetworkMeta {
                kind: "segnet".into(),
                arch,
                seed,
                iteration,
            },
            params,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(serde_json::to_value(&self.meta).expect("serializable"));
        a.push_params("", &self.params);
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: NetworkMeta = serde_json::from_value(archive.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("network metadata: {e}")))?;
        if meta.kind != "segnet" {
            return Err(Error::Checkpoint(format!("expected a segnet checkpoint, found `{}`", meta.kind)));
        }
        Ok(Self {
            meta,
            params: archive.params("")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
