//! Named parameter store and its checkpoint container.
//!
//! Checkpoints are flat binary files; see `docs/formats.md` for the exact
//! layout. All multi-byte values are little-endian and tensor payloads are
//! raw `f32`, so a load/save cycle is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Result, VqcdError};

const CKPT_MAGIC: &[u8; 8] = b"VQCDCKP1";

/// Metadata record stored beside the tensors in a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task_id: Option<usize>,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

struct Entry {
    tensor: Tensor,
    trainable: bool,
}

/// Map from hierarchical parameter name to tensor. Iteration is always in
/// sorted name order, so optimizer passes are reproducible.
#[derive(Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.insert_with(name, tensor, true);
    }

    pub fn insert_with(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Entry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Sorted iteration over `(name, tensor)`.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.tensor))
    }

    /// Sorted iteration over trainable entries only.
    pub fn iter_trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.as_str(), &mut e.tensor))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Names with a given prefix, sorted.
    pub fn names_under(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            if e.trainable {
                e.tensor.set_grad_zero();
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.clear_grad();
        }
    }

    /// Deep copy of tensors (gradients are not copied).
    pub fn snapshot(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, e) in &self.entries {
            let mut t = Tensor::zeros(e.tensor.shape().to_vec());
            t.data_mut().copy_from_slice(e.tensor.data());
            out.insert_with(name.clone(), t, e.trainable);
        }
        out
    }

    // ── checkpoint container ────────────────────────────────────────────

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let meta_json = serde_json::to_vec(meta)?;
        buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_json);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(e.trainable as u8);
            buf.push(e.tensor.shape().len() as u8);
            for &d in e.tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| VqcdError::io(dir.display().to_string(), e))?;
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| VqcdError::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| VqcdError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParameterStore, CheckpointMeta)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| VqcdError::io(path.display().to_string(), e))?;
        let bad = |detail: &str| VqcdError::Format {
            what: "checkpoint",
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let meta_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(meta_len)?)?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("non-utf8 name"))?
                .to_string();
            let trainable = take(1)?[0] != 0;
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert_with(name, Tensor::new(shape, data)?, trainable);
        }
        Ok((store, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn iteration_is_sorted() {
        let mut s = ParameterStore::new();
        s.insert("b.w", Tensor::zeros(vec![1]));
        s.insert("a.w", Tensor::zeros(vec![1]));
        s.insert("a.b", Tensor::zeros(vec![1]));
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["a.b", "a.w", "b.w"]);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let mut rng = seeded(3);
        let mut s = ParameterStore::new();
        s.insert("unet.down1.conv.kernel", Tensor::randn(vec![4, 3, 5], 0.7, &mut rng));
        s.insert_with("norm.stats", Tensor::randn(vec![6], 1.3, &mut rng), false);
        let meta = CheckpointMeta {
            task_id: Some(2),
            step: 40_000,
            seed: 17,
            config_hash: 0xdead_beef,
            extra: Default::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        s.save(&path, &meta).unwrap();
        let (loaded, meta2) = ParameterStore::load(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.len(), 2);
        for (name, t) in s.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            // Bit-exact comparison.
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = l.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(!loaded.is_trainable("norm.stats"));
        assert!(loaded.is_trainable("unet.down1.conv.kernel"));
    }
}
