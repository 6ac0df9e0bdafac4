//! Named-tensor checkpoint archive.
//!
//! Layout, all little-endian:
//! u32 format version, u32 tensor count, then per tensor
//! {u32 name length, name bytes, u32 rank, u64 per-dim extents,
//! u8 dtype tag (0 = f32), f32 payload}. Save -> load -> save must
//! round-trip byte-exactly.
//!
//! Optimizer moments are stored as "adam.m.<param>" / "adam.v.<param>",
//! counters as one-element "meta.*" tensors. Adam hyperparameters are not
//! stored; a resume takes them from the run config.

use crate::error::{Error, Result};
use crate::optim::{AdamState, TrainConfig};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered list of named f32 tensors. Order is part of the format: writing
/// what was read reproduces the file bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate checkpoint tensor {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "tensor {name:?} shape {shape:?} expects {numel} elements, got {}",
                data.len()
            )));
        }
        self.entries.push(ArchiveEntry { name, shape, data });
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = cur.u32()?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::parse("checkpoint tensor name is not utf-8"))?
                .to_string();
            let rank = cur.u32()?;
            if rank > MAX_RANK {
                return Err(Error::parse(format!("tensor {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = cur.u64()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::parse(format!("tensor {name:?} extents overflow")))?;
                shape.push(d);
            }
            let tag = cur.u8()?;
            if tag != DTYPE_F32 {
                return Err(Error::parse(format!("tensor {name:?} has unknown dtype tag {tag}")));
            }
            let raw = cur.take(numel * 4)?;
            let data =
                raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            archive.push(name, shape, data)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::parse(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Archive::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainMeta {
    pub epoch: u64,
    pub step: u64,
}

fn to_f32_vec<T: Scalar>(data: &[T]) -> Vec<f32> {
    data.iter().map(|x| x.to_f32().unwrap()).collect()
}

/// Serializes parameters (in store order), optional optimizer moments and
/// the step counters into one archive file.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
    meta: &TrainMeta,
) -> Result<()> {
    let mut archive = Archive::new();
    for (name, tensor) in params.iter() {
        archive.push(name, tensor.shape().to_vec(), to_f32_vec(tensor.data()))?;
    }
    if let Some(adam) = adam {
        for (i, (name, tensor)) in params.iter().enumerate() {
            archive.push(
                format!("adam.m.{name}"),
                tensor.shape().to_vec(),
                to_f32_vec(&adam.m[i]),
            )?;
        }
        for (i, (name, tensor)) in params.iter().enumerate() {
            archive.push(
                format!("adam.v.{name}"),
                tensor.shape().to_vec(),
                to_f32_vec(&adam.v[i]),
            )?;
        }
        archive.push("meta.adam.t", vec![1], vec![adam.t as f32])?;
    }
    archive.push("meta.epoch", vec![1], vec![meta.epoch as f32])?;
    archive.push("meta.step", vec![1], vec![meta.step as f32])?;
    archive.write(path)
}

pub struct LoadedCheckpoint<T> {
    pub params: ParamStore<T>,
    pub meta: TrainMeta,
    adam_m: Vec<Vec<T>>,
    adam_v: Vec<Vec<T>>,
    adam_t: Option<u64>,
}

impl<T: Scalar> LoadedCheckpoint<T> {
    pub fn has_adam(&self) -> bool {
        self.adam_t.is_some()
    }

    /// Rebuilds the optimizer: stored moments and counter when present,
    /// fresh zeros otherwise. Hyperparameters always come from `cfg`.
    pub fn restore_adam(&self, cfg: &TrainConfig) -> AdamState<T> {
        let mut adam = AdamState::from_config(&self.params, cfg);
        if let Some(t) = self.adam_t {
            adam.t = t;
            adam.m = self.adam_m.clone();
            adam.v = self.adam_v.clone();
        }
        adam
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let archive = Archive::read(path)?;
    let mut params = ParamStore::<T>::new();
    for e in &archive.entries {
        if e.name.starts_with("adam.") || e.name.starts_with("meta.") {
            continue;
        }
        let data = e.data.iter().map(|&x| crate::tensor::lit::<T>(x as f64)).collect();
        params.add(e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?);
    }
    let scalar_meta = |name: &str| -> Result<u64> {
        let e = archive
            .find(name)
            .ok_or_else(|| Error::parse(format!("checkpoint is missing {name}")))?;
        Ok(e.data[0] as u64)
    };
    let meta = TrainMeta { epoch: scalar_meta("meta.epoch")?, step: scalar_meta("meta.step")? };

    let any_adam = archive.entries.iter().any(|e| e.name.starts_with("adam."));
    let (mut adam_m, mut adam_v, mut adam_t) = (Vec::new(), Vec::new(), None);
    if any_adam {
        for (name, tensor) in params.iter() {
            for (prefix, out) in [("adam.m", &mut adam_m), ("adam.v", &mut adam_v)] {
                let full = format!("{prefix}.{name}");
                let e = archive
                    .find(&full)
                    .ok_or_else(|| Error::parse(format!("checkpoint is missing {full}")))?;
                if e.shape != tensor.shape() {
                    return Err(Error::parse(format!(
                        "{full} has shape {:?}, parameter has {:?}",
                        e.shape,
                        tensor.shape()
                    )));
                }
                out.push(e.data.iter().map(|&x| crate::tensor::lit::<T>(x as f64)).collect());
            }
        }
        adam_t = Some(scalar_meta("meta.adam.t")?);
    }
    Ok(LoadedCheckpoint { params, meta, adam_m, adam_v, adam_t })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 9.0, -3.5]).unwrap());
        store.add("b", Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        store
    }

    #[test]
    fn save_load_save_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));

        let mut store = small_store();
        let mut adam = AdamState::new(&store, 1e-3);
        let grads = vec![vec![0.5f32; 6], vec![-0.25; 3]];
        adam.step(&mut store, &grads).unwrap();

        let meta = TrainMeta { epoch: 3, step: 42 };
        save_checkpoint(&p1, &store, Some(&adam), &meta).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(
            &p1.clone(),
            &loaded.params,
            Some(&loaded.restore_adam(&TrainConfig::reference())),
            &loaded.meta,
        )
        .unwrap();
        std::fs::copy(&p1, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        assert_eq!(loaded.meta, meta);
        assert!(loaded.has_adam());
        let restored = loaded.restore_adam(&TrainConfig::reference());
        assert_eq!(restored.t, 1);
        assert_eq!(restored.m, adam.m);
        assert_eq!(restored.v, adam.v);
        for (name, tensor) in store.iter() {
            let got = loaded.params.get(loaded.params.find(name).unwrap());
            assert_eq!(got.data(), tensor.data());
        }
    }

    #[test]
    fn reload_of_the_saved_bytes_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let store = small_store();
        save_checkpoint(&path, &store, None, &TrainMeta::default()).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert!(!loaded.has_adam());
        save_checkpoint(&path, &loaded.params, None, &loaded.meta).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn fresh_adam_after_params_only_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&path, &small_store(), None, &TrainMeta { epoch: 7, step: 9 }).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let adam = loaded.restore_adam(&TrainConfig::reference());
        assert_eq!(adam.t, 0);
        assert!(adam.m.iter().all(|m| m.iter().all(|&x| x == 0.0)));
        assert_eq!(loaded.meta.epoch, 7);
    }

    #[test]
    fn corrupt_files_are_rejected_with_parse_errors() {
        let store = small_store();
        let mut archive = Archive::new();
        for (name, t) in store.iter() {
            archive.push(name, t.shape().to_vec(), t.data().to_vec()).unwrap();
        }
        let good = archive.to_bytes();

        let mut wrong_version = good.clone();
        wrong_version[0] = 99;
        assert!(Archive::from_bytes(&wrong_version).unwrap_err().to_string().contains("version"));

        let truncated = &good[..good.len() - 3];
        assert!(Archive::from_bytes(truncated).unwrap_err().to_string().contains("truncated"));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(Archive::from_bytes(&trailing).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn duplicate_and_misshapen_entries_are_rejected() {
        let mut archive = Archive::new();
        archive.push("x", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(archive.push("x", vec![2], vec![1.0, 2.0]).is_err());
        assert!(archive.push("y", vec![3], vec![1.0]).is_err());
    }
}
