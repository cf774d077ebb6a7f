//! Named parameter stores, their binary container, and weight inheritance
//! from original checkpoints onto lowered graphs.
//!
//! The `DCKP` container is a little-endian file:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `DCKP` |
//! | 4 | `u32` version, currently 1 |
//! | 8 | `u64` manifest length `L` |
//! | L | manifest JSON |
//! | rest | blob |
//!
//! The manifest lists every tensor as `{name, shape, dtype, offset, nbytes}`
//! in storage order, together with the checkpoint metadata. Offsets index the
//! blob and ranges never overlap.

mod inherit;
mod sbt;

pub use inherit::{inherit_weights, ParamDirective, ParamSource};
pub use sbt::{load_sbt, read_sbt, save_sbt, write_sbt};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Config echo stored alongside the tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub distilled: bool,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: CheckpointMeta,
    pub tensors: Vec<ManifestEntry>,
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count over all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = (t.numel() * t.dtype().size()) as u64;
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: t.dtype(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        Manifest {
            meta: self.meta.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!(
                "checkpoint header needs 16 bytes, file has {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                &bytes[..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if mlen > body.len() as u64 {
            return Err(Error::Truncated(format!(
                "manifest claims {mlen} bytes, {} available",
                body.len()
            )));
        }
        let (mbytes, blob) = body.split_at(mlen as usize);
        let manifest: Manifest = serde_json::from_slice(mbytes)
            .map_err(|e| Error::Format(format!("manifest JSON: {e}")))?;

        let mut ckpt = Checkpoint::new(manifest.meta);
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        for e in &manifest.tensors {
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Format(format!("shape of `{}` overflows", e.name)))?;
            if numel * e.dtype.size() as u64 != e.nbytes {
                return Err(Error::Format(format!(
                    "`{}`: {} bytes recorded for shape {:?} of {}",
                    e.name, e.nbytes, e.shape, e.dtype
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .ok_or_else(|| Error::Format(format!("offset of `{}` overflows", e.name)))?;
            if end > blob.len() as u64 {
                return Err(Error::Truncated(format!(
                    "`{}` spans bytes {}..{end} of a {}-byte blob",
                    e.name,
                    e.offset,
                    blob.len()
                )));
            }
            spans.push((e.offset, end, &e.name));
            let t = Tensor::from_le_bytes(
                e.shape.clone(),
                e.dtype,
                &blob[e.offset as usize..end as usize],
            )?;
            ckpt.insert(e.name.clone(), t)?;
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Format(format!(
                    "`{}` overlaps `{}` in the blob",
                    pair[1].2, pair[0].2
                )));
            }
        }
        let used = spans.last().map_or(0, |s| s.1);
        if used != blob.len() as u64 {
            return Err(Error::Format(format!(
                "blob has {} bytes but the manifest accounts for {used}",
                blob.len()
            )));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta {
            variant: "custom".into(),
            distilled: false,
            num_classes: 10,
            extra: BTreeMap::new(),
        });
        c.insert(
            "blk0.attn.qkv.w",
            Tensor::from_f32(vec![2, 3], vec![1., 2., 3., 4., 5., -0.0]).unwrap(),
        )
        .unwrap();
        c.insert("q", Tensor::from_i8(vec![3], vec![-128, 0, 127]).unwrap())
            .unwrap();
        c.insert(
            "b",
            Tensor::from_i32(vec![1, 2], vec![i32::MIN, 7]).unwrap(),
        )
        .unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.manifest(), c.manifest());
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            c.names().collect::<Vec<_>>()
        );
        for ((_, a), (_, b)) in c.iter().zip(back.iter()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_blob() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn duplicate_names() {
        let mut c = sample();
        let err = c
            .insert("blk0.attn.qkv.w", Tensor::scalar(1.0))
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateName(ref n) if n == "blk0.attn.qkv.w"));

        // A hand-edited manifest repeating a name is rejected on load.
        let c = sample();
        let mut m = c.manifest();
        m.tensors[1].name = "blk0.attn.qkv.w".into();
        let mj = serde_json::to_vec(&m).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(mj.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&mj);
        for (_, t) in c.iter() {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_param_is_named() {
        let err = sample().get("head.w").unwrap_err();
        assert_eq!(err.to_string(), "missing parameter `head.w`");
    }
}
