//! Quantized space alignment: per-task vector-quantized encoders/decoders
//! mapping heterogeneous state and action vectors into fixed-size aligned
//! feature grids, plus the padding-alignment baseline.
//!
//! Each task owns separate codecs per modality; codebook blocks never
//! overlap between tasks, so adding a task leaves earlier codecs untouched.

mod codec;
mod train;

pub use codec::{Codec, Modality, TaskCodecs};
pub use train::{train_codec, train_codec_with, QsaTrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqcdError};

/// Codec hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Codes per task per modality.
    pub n_codes: usize,
    pub n_latents_state: usize,
    pub n_latents_action: usize,
    pub d_latent: usize,
    pub commitment_cost: f32,
    /// Squared-norm bound on every code vector.
    pub rho: f32,
    pub hidden: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    pub batch: usize,
    /// Steps a code may stay unused before it is re-seeded from data.
    pub dead_code_steps: u64,
    /// Fraction of rows held out for reconstruction evaluation.
    pub holdout_fraction: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            n_codes: 512,
            n_latents_state: 10,
            n_latents_action: 5,
            d_latent: 2,
            commitment_cost: 0.25,
            rho: 3.0,
            hidden: 256,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch: 32,
            dead_code_steps: 5000,
            holdout_fraction: 0.1,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_codes == 0 {
            return Err(VqcdError::config("n_codes must be >= 1"));
        }
        if self.d_latent == 0 {
            return Err(VqcdError::config("d_latent must be >= 1"));
        }
        if self.rho <= 0.0 {
            return Err(VqcdError::config("rho must be > 0"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(VqcdError::config("holdout_fraction must be in [0,1)"));
        }
        Ok(())
    }

    pub fn n_latents(&self, modality: Modality) -> usize {
        match modality {
            Modality::State => self.n_latents_state,
            Modality::Action => self.n_latents_action,
        }
    }

    /// Aligned feature width for a modality (`n_latents * d_latent`).
    pub fn aligned_dim(&self, modality: Modality) -> usize {
        self.n_latents(modality) * self.d_latent
    }
}

/// Nearest-code assignment per latent row; ties break toward the lowest
/// code index. `codebook` is `n_codes x d_latent` row-major, `rows` is
/// a flat run of `d_latent`-sized latent rows.
pub fn quantize_rows(
    codebook: &[f32],
    n_codes: usize,
    d_latent: usize,
    rows: &[f32],
) -> (Vec<f32>, Vec<usize>) {
    debug_assert_eq!(codebook.len(), n_codes * d_latent);
    debug_assert_eq!(rows.len() % d_latent, 0);
    let n_rows = rows.len() / d_latent;
    let mut z_q = vec![0.0f32; rows.len()];
    let mut indices = vec![0usize; n_rows];
    for r in 0..n_rows {
        let row = &rows[r * d_latent..(r + 1) * d_latent];
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for c in 0..n_codes {
            let code = &codebook[c * d_latent..(c + 1) * d_latent];
            let mut d = 0.0f32;
            for (x, e) in row.iter().zip(code) {
                let diff = x - e;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        indices[r] = best;
        z_q[r * d_latent..(r + 1) * d_latent]
            .copy_from_slice(&codebook[best * d_latent..(best + 1) * d_latent]);
    }
    (z_q, indices)
}

/// Rescale every code with squared norm above `rho` back onto the bound,
/// preserving its direction. Codes inside the bound are untouched.
pub fn clip_codebook(codebook: &mut [f32], d_latent: usize, rho: f32) {
    debug_assert!(rho > 0.0);
    for code in codebook.chunks_mut(d_latent) {
        let n2: f32 = code.iter().map(|&v| v * v).sum();
        if n2 > rho {
            let factor = (rho / n2).sqrt();
            for v in code.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Zero-pad a vector up to `d_max` (the padding-alignment baseline).
pub fn pad_align(x: &[f32], d_max: usize) -> Result<Vec<f32>> {
    if x.len() > d_max {
        return Err(VqcdError::config(format!(
            "pad_align: input dim {} exceeds target {d_max}",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    out.resize(d_max, 0.0);
    Ok(out)
}
