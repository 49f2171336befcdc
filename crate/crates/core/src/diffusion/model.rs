//! Noise-prediction facade over the U-net plus the training loss.

use rand::Rng;

use super::schedule::NoiseSchedule;
use super::unet::{GateMap, TemporalUnet, UnetConfig};
use crate::error::{Result, VqcdError};
use crate::rng::{fill_normal_f32, Prng};
use crate::tensor::{Graph, ParameterStore, Var};

pub struct Diffuser {
    pub unet: TemporalUnet,
    pub schedule: NoiseSchedule,
}

impl Diffuser {
    pub fn new(unet_cfg: UnetConfig, k_max: usize) -> Result<Self> {
        Ok(Self {
            unet: TemporalUnet::new(unet_cfg)?,
            schedule: NoiseSchedule::cosine(k_max)?,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.unet.cfg.in_channels * self.unet.cfg.seq_len
    }

    fn build_inputs(
        &self,
        g: &mut Graph<f32>,
        tau: &[f32],
        batch: usize,
        k: &[usize],
        cond: &[Option<f32>],
    ) -> Result<(Var, Var, Var)> {
        let c = &self.unet.cfg;
        if tau.len() != batch * self.feature_len() {
            return Err(VqcdError::ShapeMismatch {
                op: "predict_noise",
                expected: vec![batch, c.in_channels, c.seq_len],
                got: vec![tau.len()],
            });
        }
        if k.len() != batch || cond.len() != batch {
            return Err(VqcdError::ShapeMismatch {
                op: "predict_noise_cond",
                expected: vec![batch],
                got: vec![k.len(), cond.len()],
            });
        }
        for &ki in k {
            if ki < 1 || ki > self.schedule.k_max() {
                return Err(VqcdError::config(format!(
                    "diffusion step {ki} outside [1, {}]",
                    self.schedule.k_max()
                )));
            }
        }
        let x = g.input(&[batch, c.in_channels, c.seq_len], tau.to_vec());
        let mut sins = Vec::with_capacity(batch * c.sin_dim);
        for &ki in k {
            sins.extend(self.unet.sin_embed(ki));
        }
        let ks = g.input(&[batch, c.sin_dim], sins);
        // Null condition is the zero vector; real conditions carry a
        // presence flag so a zero-valued return stays distinguishable.
        let mut cv = Vec::with_capacity(batch * 2);
        for c in cond {
            match c {
                Some(v) => cv.extend_from_slice(&[*v, 1.0]),
                None => cv.extend_from_slice(&[0.0, 0.0]),
            }
        }
        let cd = g.input(&[batch, 2], cv);
        Ok((x, ks, cd))
    }

    /// Run the masked U-net on a batch of noisy sequences. Output has the
    /// same layout as the input.
    pub fn predict_noise(
        &self,
        store: &ParameterStore,
        gates: Option<&GateMap>,
        tau: &[f32],
        batch: usize,
        k: &[usize],
        cond: &[Option<f32>],
    ) -> Result<Vec<f32>> {
        let mut g: Graph<f32> = Graph::new();
        let (x, ks, cd) = self.build_inputs(&mut g, tau, batch, k, cond)?;
        let out = self.unet.forward(&mut g, store, gates, x, ks, cd)?;
        Ok(g.value(out).to_vec())
    }

    /// Build the denoising loss for one training batch on `g`:
    /// per-sample `k ~ U{1..K}`, `eps ~ N(0, I)`, condition dropped to the
    /// null token with probability `cond_dropout`. Returns the loss node;
    /// the caller runs backward and the optimizer.
    pub fn diffusion_loss(
        &self,
        g: &mut Graph<f32>,
        store: &ParameterStore,
        gates: Option<&GateMap>,
        x0: &[f32],
        batch: usize,
        cond: &[f32],
        cond_dropout: f64,
        rng: &mut Prng,
    ) -> Result<Var> {
        let n = self.feature_len();
        if x0.len() != batch * n || cond.len() != batch {
            return Err(VqcdError::ShapeMismatch {
                op: "diffusion_loss",
                expected: vec![batch * n],
                got: vec![x0.len()],
            });
        }
        let k_max = self.schedule.k_max();
        let mut ks = Vec::with_capacity(batch);
        let mut eps = vec![0.0f32; batch * n];
        fill_normal_f32(rng, &mut eps);
        let mut tau = vec![0.0f32; batch * n];
        for b in 0..batch {
            let k = rng.gen_range(1..=k_max);
            ks.push(k);
            let noisy = self
                .schedule
                .forward_diffuse(&x0[b * n..(b + 1) * n], k, &eps[b * n..(b + 1) * n])?;
            tau[b * n..(b + 1) * n].copy_from_slice(&noisy);
        }
        let conds: Vec<Option<f32>> = cond
            .iter()
            .map(|&v| {
                if rng.gen_bool(cond_dropout) {
                    None
                } else {
                    Some(v)
                }
            })
            .collect();
        let (x, ksin, cd) = self.build_inputs(g, &tau, batch, &ks, &conds)?;
        let out = self.unet.forward(g, store, gates, x, ksin, cd)?;
        let target = g.input(&[batch, self.unet.cfg.in_channels, self.unet.cfg.seq_len], eps);
        g.sq_diff_mean(out, target)
    }
}
