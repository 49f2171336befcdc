//! Temporal 1-d U-net noise predictor.
//!
//! Two resolution levels over the sequence axis with residual conv blocks,
//! group normalization, mish activations, and additive conditioning from a
//! diffusion-step embedding plus a return embedding. The final convolution
//! is zero-initialized so an untrained net predicts zero noise.
//!
//! Every trainable tensor can be gated by a per-task binary mask; the gate
//! is applied where parameters enter the graph, so masked weights influence
//! neither the forward output nor any gradient.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqcdError};
use crate::rng::Prng;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

/// Dense 0/1 gates keyed by parameter name.
pub type GateMap = BTreeMap<String, Arc<Vec<f32>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    /// Channels of the diffused feature sequence.
    pub in_channels: usize,
    /// Base channel width; the lower resolution uses twice this.
    pub hidden: usize,
    /// Group-norm group count; must divide `hidden`.
    pub groups: usize,
    /// Temporal kernel size (odd).
    pub kernel: usize,
    /// Width of the sinusoidal diffusion-step features.
    pub sin_dim: usize,
    /// Conditioning embedding width.
    pub emb_dim: usize,
    /// Sequence length; must be divisible by 4 for the two downsamples.
    pub seq_len: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 30,
            hidden: 256,
            groups: 8,
            kernel: 5,
            sin_dim: 16,
            emb_dim: 64,
            seq_len: 8,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(VqcdError::config("unet kernel must be odd"));
        }
        if self.hidden == 0 || self.hidden % self.groups != 0 {
            return Err(VqcdError::config(format!(
                "hidden {} must be divisible by groups {}",
                self.hidden, self.groups
            )));
        }
        if self.seq_len % 4 != 0 || self.seq_len < 4 || self.seq_len > 56 {
            return Err(VqcdError::config(format!(
                "sequence length {} must be a multiple of 4 in [4, 56]",
                self.seq_len
            )));
        }
        if self.sin_dim % 2 != 0 {
            return Err(VqcdError::config("sin_dim must be even"));
        }
        Ok(())
    }
}

pub struct TemporalUnet {
    pub cfg: UnetConfig,
}

impl TemporalUnet {
    pub fn new(cfg: UnetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Fresh parameter store with fan-in scaled init and a zeroed final
    /// convolution.
    pub fn init_params(&self, rng: &mut Prng) -> ParameterStore {
        let c = &self.cfg;
        let (h, h2) = (c.hidden, 2 * c.hidden);
        let mut store = ParameterStore::new();
        let dense = |s: &mut ParameterStore, name: &str, i: usize, o: usize, rng: &mut Prng| {
            s.insert(format!("{name}.w"), Tensor::kaiming(vec![i, o], i, rng));
            s.insert(format!("{name}.b"), Tensor::zeros(vec![o]));
        };
        let conv = |s: &mut ParameterStore, name: &str, co: usize, ci: usize, k: usize, rng: &mut Prng| {
            s.insert(
                format!("{name}.w"),
                Tensor::kaiming(vec![co, ci, k], ci * k, rng),
            );
            s.insert(format!("{name}.b"), Tensor::zeros(vec![co]));
        };
        let res = |s: &mut ParameterStore, p: &str, ci: usize, co: usize, rng: &mut Prng| {
            conv(s, &format!("{p}.conv1"), co, ci, c.kernel, rng);
            s.insert(format!("{p}.gn1.g"), Tensor::full(vec![co], 1.0));
            s.insert(format!("{p}.gn1.b"), Tensor::zeros(vec![co]));
            dense(s, &format!("{p}.emb"), c.emb_dim, co, rng);
            conv(s, &format!("{p}.conv2"), co, co, c.kernel, rng);
            s.insert(format!("{p}.gn2.g"), Tensor::full(vec![co], 1.0));
            s.insert(format!("{p}.gn2.b"), Tensor::zeros(vec![co]));
            if ci != co {
                conv(s, &format!("{p}.skip"), co, ci, 1, rng);
            }
        };

        dense(&mut store, "time.l1", c.sin_dim, c.emb_dim, rng);
        dense(&mut store, "time.l2", c.emb_dim, c.emb_dim, rng);
        dense(&mut store, "ret.l1", 2, c.emb_dim, rng);
        dense(&mut store, "ret.l2", c.emb_dim, c.emb_dim, rng);
        conv(&mut store, "init", h, c.in_channels, c.kernel, rng);
        res(&mut store, "d1a", h, h, rng);
        res(&mut store, "d1b", h, h, rng);
        conv(&mut store, "down1", h, h, 3, rng);
        res(&mut store, "d2a", h, h2, rng);
        res(&mut store, "d2b", h2, h2, rng);
        conv(&mut store, "down2", h2, h2, 3, rng);
        res(&mut store, "mida", h2, h2, rng);
        res(&mut store, "midb", h2, h2, rng);
        conv(&mut store, "up1", h2, h2, 3, rng);
        res(&mut store, "u1a", 2 * h2, h2, rng);
        res(&mut store, "u1b", h2, h2, rng);
        conv(&mut store, "up2", h, h2, 3, rng);
        res(&mut store, "u2a", 2 * h, h, rng);
        res(&mut store, "u2b", h, h, rng);
        store.insert("final.gn.g", Tensor::full(vec![h], 1.0));
        store.insert("final.gn.b", Tensor::zeros(vec![h]));
        store.insert("final.w", Tensor::zeros(vec![c.in_channels, h, c.kernel]));
        store.insert("final.b", Tensor::zeros(vec![c.in_channels]));
        store
    }

    pub fn param_shapes(&self, rng: &mut Prng) -> Vec<(String, Vec<usize>)> {
        self.init_params(rng)
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Sinusoidal features of a diffusion step.
    pub fn sin_embed(&self, k: usize) -> Vec<f32> {
        let half = self.cfg.sin_dim / 2;
        let mut out = Vec::with_capacity(self.cfg.sin_dim);
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out.push((k as f64 * freq).cos() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / half.max(1) as f64).exp();
            out.push((k as f64 * freq).sin() as f32);
        }
        out
    }

    /// Forward pass on the tape. `x` is `[B, in_channels, seq_len]`,
    /// `k_sin` is `[B, sin_dim]`, `cond` is `[B, 2]` (value, presence).
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        store: &ParameterStore,
        gates: Option<&GateMap>,
        x: Var,
        k_sin: Var,
        cond: Var,
    ) -> Result<Var> {
        let c = &self.cfg;
        let lease = |g: &mut Graph<f32>, name: &str| -> Result<Var> {
            let v = g.lease(store, name)?;
            match gates {
                Some(map) => {
                    let gate = map.get(name).ok_or_else(|| {
                        VqcdError::invariant(format!("mask misses tensor `{name}`"))
                    })?;
                    g.mul_const(v, Arc::clone(gate))
                }
                None => Ok(v),
            }
        };
        let dense = |g: &mut Graph<f32>, p: &str, x: Var| -> Result<Var> {
            let w = lease(g, &format!("{p}.w"))?;
            let b = lease(g, &format!("{p}.b"))?;
            g.dense(x, w, Some(b))
        };
        let conv = |g: &mut Graph<f32>, p: &str, x: Var, stride: usize| -> Result<Var> {
            let w = lease(g, &format!("{p}.w"))?;
            let b = lease(g, &format!("{p}.b"))?;
            g.conv1d(x, w, Some(b), stride)
        };
        let res = |g: &mut Graph<f32>, p: &str, x: Var, emb: Var, ci: usize, co: usize| -> Result<Var> {
            let mut h = conv(g, &format!("{p}.conv1"), x, 1)?;
            let gn1g = lease(g, &format!("{p}.gn1.g"))?;
            let gn1b = lease(g, &format!("{p}.gn1.b"))?;
            h = g.group_norm(h, gn1g, gn1b, c.groups, 1e-5)?;
            h = g.mish(h);
            let e = dense(g, &format!("{p}.emb"), emb)?;
            h = g.add_channel(h, e)?;
            let mut h2 = conv(g, &format!("{p}.conv2"), h, 1)?;
            let gn2g = lease(g, &format!("{p}.gn2.g"))?;
            let gn2b = lease(g, &format!("{p}.gn2.b"))?;
            h2 = g.group_norm(h2, gn2g, gn2b, c.groups, 1e-5)?;
            h2 = g.mish(h2);
            let sk = if ci == co {
                x
            } else {
                conv(g, &format!("{p}.skip"), x, 1)?
            };
            g.add(h2, sk)
        };

        let (h, h2) = (c.hidden, 2 * c.hidden);

        // Conditioning embedding.
        let mut te = dense(g, "time.l1", k_sin)?;
        te = g.mish(te);
        te = dense(g, "time.l2", te)?;
        let mut re = dense(g, "ret.l1", cond)?;
        re = g.mish(re);
        re = dense(g, "ret.l2", re)?;
        let emb = g.add(te, re)?;

        let mut cur = conv(g, "init", x, 1)?;
        cur = res(g, "d1a", cur, emb, h, h)?;
        cur = res(g, "d1b", cur, emb, h, h)?;
        let skip1 = cur;
        cur = conv(g, "down1", cur, 2)?;
        cur = res(g, "d2a", cur, emb, h, h2)?;
        cur = res(g, "d2b", cur, emb, h2, h2)?;
        let skip2 = cur;
        cur = conv(g, "down2", cur, 2)?;
        cur = res(g, "mida", cur, emb, h2, h2)?;
        cur = res(g, "midb", cur, emb, h2, h2)?;
        cur = g.upsample2(cur)?;
        cur = conv(g, "up1", cur, 1)?;
        cur = g.concat_channel(cur, skip2)?;
        cur = res(g, "u1a", cur, emb, 2 * h2, h2)?;
        cur = res(g, "u1b", cur, emb, h2, h2)?;
        cur = g.upsample2(cur)?;
        cur = conv(g, "up2", cur, 1)?;
        cur = g.concat_channel(cur, skip1)?;
        cur = res(g, "u2a", cur, emb, 2 * h, h)?;
        cur = res(g, "u2b", cur, emb, h, h)?;
        let fg = lease(g, "final.gn.g")?;
        let fb = lease(g, "final.gn.b")?;
        cur = g.group_norm(cur, fg, fb, c.groups, 1e-5)?;
        cur = g.mish(cur);
        conv(g, "final", cur, 1)
    }
}
