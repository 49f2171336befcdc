//! Per-task encoder/decoder MLP pair with a norm-constrained codebook and
//! the per-dimension input normalization learned from the task's dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{quantize_rows, VqConfig};
use crate::error::{Result, VqcdError};
use crate::rng::Prng;
use crate::tensor::{CheckpointMeta, Graph, ParameterStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    State,
    Action,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::State => "state",
            Modality::Action => "action",
        }
    }
}

/// One task's codec for one modality. Immutable after training; encode,
/// quantize and decode are pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecSpec {
    pub task_id: usize,
    pub modality: Modality,
    pub input_dim: usize,
    pub n_latents: usize,
    pub d_latent: usize,
    pub n_codes: usize,
    pub hidden: usize,
}

pub struct Codec {
    pub spec: CodecSpec,
    /// Per-dimension affine map of raw inputs onto [-1, 1].
    norm_lo: Vec<f32>,
    norm_hi: Vec<f32>,
    pub(crate) store: ParameterStore,
}

impl Codec {
    /// Fresh codec with small random weights and a near-zero codebook.
    pub fn init(
        task_id: usize,
        modality: Modality,
        input_dim: usize,
        cfg: &VqConfig,
        norm_lo: Vec<f32>,
        norm_hi: Vec<f32>,
        rng: &mut Prng,
    ) -> Result<Self> {
        cfg.validate()?;
        if norm_lo.len() != input_dim || norm_hi.len() != input_dim {
            return Err(VqcdError::config(format!(
                "normalization constants must have dim {input_dim}"
            )));
        }
        let n_latents = cfg.n_latents(modality);
        let latent_flat = n_latents * cfg.d_latent;
        let h = cfg.hidden;
        let mut store = ParameterStore::new();
        let dense = |store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Prng| {
            store.insert(format!("{name}.w"), Tensor::kaiming(vec![fan_in, fan_out], fan_in, rng));
            store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        };
        dense(&mut store, "enc.l1", input_dim, h, rng);
        dense(&mut store, "enc.l2", h, h, rng);
        dense(&mut store, "enc.out", h, latent_flat, rng);
        dense(&mut store, "dec.l1", latent_flat, h, rng);
        dense(&mut store, "dec.l2", h, h, rng);
        dense(&mut store, "dec.out", h, input_dim, rng);
        // Codebook starts tightly packed near the origin.
        let spread = 1.0 / cfg.n_codes as f32;
        store.insert(
            "codebook",
            Tensor::randn(vec![cfg.n_codes, cfg.d_latent], spread, rng),
        );
        Ok(Self {
            spec: CodecSpec {
                task_id,
                modality,
                input_dim,
                n_latents,
                d_latent: cfg.d_latent,
                n_codes: cfg.n_codes,
                hidden: h,
            },
            norm_lo,
            norm_hi,
            store,
        })
    }

    /// Normalization constants from per-dimension data extents.
    pub fn norm_from_minmax(min: &[f32], max: &[f32]) -> (Vec<f32>, Vec<f32>) {
        (min.to_vec(), max.to_vec())
    }

    pub fn aligned_dim(&self) -> usize {
        self.spec.n_latents * self.spec.d_latent
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn codebook(&self) -> &[f32] {
        self.store.get("codebook").expect("codebook present").data()
    }

    /// Affine map onto [-1, 1]; constant dimensions map to 0.
    pub fn normalize(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.spec.input_dim {
            return Err(VqcdError::TaskDimension {
                task: self.spec.task_id,
                what: "codec input",
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        Ok(x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = (self.norm_lo[d], self.norm_hi[d]);
                if hi - lo < 1e-9 {
                    0.0
                } else {
                    ((v - lo) / (hi - lo)).mul_add(2.0, -1.0).clamp(-1.0, 1.0)
                }
            })
            .collect())
    }

    pub fn denormalize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = (self.norm_lo[d], self.norm_hi[d]);
                if hi - lo < 1e-9 {
                    lo
                } else {
                    (v + 1.0) / 2.0 * (hi - lo) + lo
                }
            })
            .collect()
    }

    /// Forward the encoder on a batch of normalized rows inside a graph.
    pub(crate) fn encoder_forward(
        &self,
        g: &mut Graph<f32>,
        store: &ParameterStore,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in ["enc.l1", "enc.l2"].iter().enumerate() {
            let w = g.lease(store, &format!("{layer}.w"))?;
            let b = g.lease(store, &format!("{layer}.b"))?;
            h = g.dense(h, w, Some(b))?;
            h = g.mish(h);
            let _ = i;
        }
        let w = g.lease(store, "enc.out.w")?;
        let b = g.lease(store, "enc.out.b")?;
        g.dense(h, w, Some(b))
    }

    pub(crate) fn decoder_forward(
        &self,
        g: &mut Graph<f32>,
        store: &ParameterStore,
        z: Var,
    ) -> Result<Var> {
        let mut h = z;
        for layer in ["dec.l1", "dec.l2"] {
            let w = g.lease(store, &format!("{layer}.w"))?;
            let b = g.lease(store, &format!("{layer}.b"))?;
            h = g.dense(h, w, Some(b))?;
            h = g.mish(h);
        }
        let w = g.lease(store, "dec.out.w")?;
        let b = g.lease(store, "dec.out.b")?;
        g.dense(h, w, Some(b))
    }

    /// Encode raw rows to pre-quantization latents, `n_latents * d_latent`
    /// per row.
    pub fn encode_batch(&self, rows: &[&[f32]]) -> Result<Vec<f32>> {
        let normalized: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| self.normalize(r))
            .collect::<Result<_>>()?;
        self.encode_batch_normalized(&normalized)
    }

    pub(crate) fn encode_batch_normalized(&self, rows: &[Vec<f32>]) -> Result<Vec<f32>> {
        let batch = rows.len();
        let dim = self.spec.input_dim;
        let mut flat = Vec::with_capacity(batch * dim);
        for r in rows {
            flat.extend_from_slice(r);
        }
        let mut g: Graph<f32> = Graph::new();
        let x = g.input(&[batch, dim], flat);
        let z = self.encoder_forward(&mut g, &self.store, x)?;
        Ok(g.value(z).to_vec())
    }

    pub fn encode(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.encode_batch(&[x])
    }

    /// Nearest-code projection of latent rows.
    pub fn quantize(&self, z_e: &[f32]) -> (Vec<f32>, Vec<usize>) {
        quantize_rows(
            self.codebook(),
            self.spec.n_codes,
            self.spec.d_latent,
            z_e,
        )
    }

    /// Encode then quantize a single raw vector: the aligned feature.
    pub fn align(&self, x: &[f32]) -> Result<Vec<f32>> {
        let z_e = self.encode(x)?;
        Ok(self.quantize(&z_e).0)
    }

    /// Decode aligned features back to normalized space.
    pub fn decode_batch_normalized(&self, z_q: &[f32]) -> Result<Vec<f32>> {
        let flat_dim = self.aligned_dim();
        if z_q.len() % flat_dim != 0 {
            return Err(VqcdError::ShapeMismatch {
                op: "decode",
                expected: vec![flat_dim],
                got: vec![z_q.len()],
            });
        }
        let batch = z_q.len() / flat_dim;
        let mut g: Graph<f32> = Graph::new();
        let z = g.input(&[batch, flat_dim], z_q.to_vec());
        let x = self.decoder_forward(&mut g, &self.store, z)?;
        Ok(g.value(x).to_vec())
    }

    /// Decode one aligned feature to the task's raw space.
    pub fn decode(&self, z_q: &[f32]) -> Result<Vec<f32>> {
        let out = self.decode_batch_normalized(z_q)?;
        Ok(self.denormalize(&out))
    }

    /// Snap arbitrary feature rows onto the codebook, then decode raw.
    pub fn decode_via_codes(&self, feature: &[f32]) -> Result<Vec<f32>> {
        let (z_q, _) = self.quantize(feature);
        self.decode(&z_q)
    }
}

/// Both codecs of one task, stored together in one codec file.
pub struct TaskCodecs {
    pub state: Codec,
    pub action: Codec,
}

impl TaskCodecs {
    pub fn save(&self, path: &Path, seed: u64, config_hash: u64) -> Result<()> {
        let mut merged = ParameterStore::new();
        for (prefix, codec) in [("state", &self.state), ("action", &self.action)] {
            for (name, tensor) in codec.store.iter() {
                let mut t = Tensor::zeros(tensor.shape().to_vec());
                t.data_mut().copy_from_slice(tensor.data());
                merged.insert(format!("{prefix}.{name}"), t);
            }
            merged.insert_with(
                format!("{prefix}.norm.lo"),
                Tensor::new(vec![codec.norm_lo.len()], codec.norm_lo.clone())?,
                false,
            );
            merged.insert_with(
                format!("{prefix}.norm.hi"),
                Tensor::new(vec![codec.norm_hi.len()], codec.norm_hi.clone())?,
                false,
            );
        }
        let mut extra = std::collections::BTreeMap::new();
        extra.insert(
            "state_spec".to_string(),
            serde_json::to_string(&self.state.spec)?,
        );
        extra.insert(
            "action_spec".to_string(),
            serde_json::to_string(&self.action.spec)?,
        );
        let meta = CheckpointMeta {
            task_id: Some(self.state.spec.task_id),
            step: 0,
            seed,
            config_hash,
            extra,
        };
        merged.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<TaskCodecs> {
        let (merged, meta) = ParameterStore::load(path)?;
        let build = |prefix: &str, spec_key: &str| -> Result<Codec> {
            let spec_json = meta.extra.get(spec_key).ok_or_else(|| VqcdError::Format {
                what: "codec",
                path: path.display().to_string(),
                detail: format!("missing {spec_key} metadata"),
            })?;
            let spec: CodecSpec = serde_json::from_str(spec_json)?;
            let mut store = ParameterStore::new();
            let prefix_dot = format!("{prefix}.");
            for name in merged.names_under(&prefix_dot) {
                if name.ends_with("norm.lo") || name.ends_with("norm.hi") {
                    continue;
                }
                let t = merged.get(&name).expect("name listed");
                let mut copy = Tensor::zeros(t.shape().to_vec());
                copy.data_mut().copy_from_slice(t.data());
                store.insert(name[prefix_dot.len()..].to_string(), copy);
            }
            let lo = merged.get(&format!("{prefix}.norm.lo")).ok_or_else(|| {
                VqcdError::Format {
                    what: "codec",
                    path: path.display().to_string(),
                    detail: format!("missing {prefix} normalization"),
                }
            })?;
            let hi = merged.get(&format!("{prefix}.norm.hi")).ok_or_else(|| {
                VqcdError::Format {
                    what: "codec",
                    path: path.display().to_string(),
                    detail: format!("missing {prefix} normalization"),
                }
            })?;
            Ok(Codec {
                spec,
                norm_lo: lo.data().to_vec(),
                norm_hi: hi.data().to_vec(),
                store,
            })
        };
        Ok(TaskCodecs {
            state: build("state", "state_spec")?,
            action: build("action", "action_spec")?,
        })
    }
}
