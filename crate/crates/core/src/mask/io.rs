//! Mask file container. See `docs/formats.md` for the byte layout.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BitMask, TaskMask};
use crate::error::{Result, VqcdError};

const MASK_MAGIC: &[u8; 8] = b"VQCDMSK1";

#[derive(Serialize, Deserialize)]
struct MaskMeta {
    task_id: usize,
    seed: u64,
}

pub fn save_mask(mask: &TaskMask, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    let meta = serde_json::to_vec(&MaskMeta {
        task_id: mask.task_id,
        seed: mask.seed,
    })?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let entries: Vec<_> = mask.entries().collect();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, bits) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&bits.to_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| VqcdError::io(dir.display().to_string(), e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| VqcdError::io(path.display().to_string(), e))
}

pub fn load_mask(path: &Path) -> Result<TaskMask> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| VqcdError::io(path.display().to_string(), e))?;
    let bad = |detail: &str| VqcdError::Format {
        what: "mask",
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
    if take(8)? != MASK_MAGIC {
        return Err(bad("bad magic"));
    }
    let meta_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let meta: MaskMeta = serde_json::from_slice(take(meta_len)?)?;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("non-utf8 name"))?
            .to_string();
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let bits = BitMask::from_bytes(numel, take(numel.div_ceil(8))?)?;
        entries.insert(name, (shape, bits));
    }
    Ok(TaskMask::from_entries(meta.task_id, meta.seed, entries))
}
