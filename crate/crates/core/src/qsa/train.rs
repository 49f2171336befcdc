//! Codec training: reconstruction + commitment + codebook terms with a
//! straight-through estimator, norm clipping after every codebook update,
//! and dead-code re-seeding.

use rand::Rng;

use super::{clip_codebook, Codec, VqConfig};
use crate::error::{Result, VqcdError};
use crate::rng::Prng;
use crate::tensor::{AdamState, Graph};

#[derive(Debug, Clone)]
pub struct QsaTrainReport {
    /// Per-step total loss.
    pub loss_curve: Vec<f32>,
    /// Reconstruction MSE on held-out rows in normalized space.
    pub holdout_mse: f64,
    /// Codes re-seeded because they stayed unused too long.
    pub reseeded_codes: usize,
    /// Largest squared code norm observed after training.
    pub max_code_norm_sq: f32,
}

/// Train a codec in place on raw data rows. The learning rate decays
/// linearly from `lr_start` to `lr_end`; the codebook constraint is
/// enforced after every update step.
pub fn train_codec(
    codec: &mut Codec,
    rows: &[&[f32]],
    steps: u64,
    rng: &mut Prng,
) -> Result<QsaTrainReport> {
    train_codec_with(codec, rows, steps, &VqConfig::default(), rng)
}

pub fn train_codec_with(
    codec: &mut Codec,
    rows: &[&[f32]],
    steps: u64,
    cfg: &VqConfig,
    rng: &mut Prng,
) -> Result<QsaTrainReport> {
    if rows.is_empty() {
        return Err(VqcdError::config("empty dataset for codec training"));
    }
    let dim = codec.spec.input_dim;
    let normalized: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| codec.normalize(r))
        .collect::<Result<_>>()?;

    // Deterministic holdout: every k-th row, at least one row training.
    let holdout_every = if cfg.holdout_fraction > 0.0 {
        ((1.0 / cfg.holdout_fraction).round() as usize).max(2)
    } else {
        usize::MAX
    };
    let mut train_rows: Vec<&Vec<f32>> = Vec::new();
    let mut held_rows: Vec<&Vec<f32>> = Vec::new();
    for (i, r) in normalized.iter().enumerate() {
        if holdout_every != usize::MAX && i % holdout_every == holdout_every - 1 {
            held_rows.push(r);
        } else {
            train_rows.push(r);
        }
    }
    if train_rows.is_empty() {
        train_rows = normalized.iter().collect();
    }
    if held_rows.is_empty() {
        held_rows = train_rows.clone();
    }

    let n_codes = codec.spec.n_codes;
    let d_latent = codec.spec.d_latent;
    let batch = cfg.batch.max(1).min(train_rows.len());
    let mut adam = AdamState::new(cfg.lr_start);
    let mut graph: Graph<f32> = Graph::new();
    let mut loss_curve = Vec::with_capacity(steps as usize);
    let mut last_used = vec![0u64; n_codes];
    let mut reseeded = 0usize;

    for step in 0..steps {
        // Linear decay.
        let frac = if steps > 1 {
            step as f64 / (steps - 1) as f64
        } else {
            0.0
        };
        adam.lr = (cfg.lr_start as f64 + (cfg.lr_end as f64 - cfg.lr_start as f64) * frac) as f32;

        let mut flat = Vec::with_capacity(batch * dim);
        for _ in 0..batch {
            let idx = rng.gen_range(0..train_rows.len());
            flat.extend_from_slice(train_rows[idx]);
        }

        graph.clear();
        let x = graph.input(&[batch, dim], flat);
        let z_e = codec.encoder_forward(&mut graph, &codec.store, x)?;
        let z_e_vals = graph.value(z_e).to_vec();
        let (z_q_vals, indices) = codec.quantize(&z_e_vals);
        for &i in &indices {
            last_used[i] = step + 1;
        }

        // Straight-through: decoder sees code values, gradient reaches the
        // encoder as identity.
        let st_shift: Vec<f32> = z_q_vals
            .iter()
            .zip(&z_e_vals)
            .map(|(q, e)| q - e)
            .collect();
        let z_st = graph.add_const(z_e, st_shift)?;
        let x_hat = codec.decoder_forward(&mut graph, &codec.store, z_st)?;
        let recon = graph.sq_diff_mean(x_hat, x)?;

        // Encoder commitment toward the (frozen) selected codes.
        let z_q_const = graph.input(&[batch, codec.aligned_dim()], z_q_vals.clone());
        let commit = graph.sq_diff_mean(z_q_const, z_e)?;
        let commit_scaled = graph.scale(commit, cfg.commitment_cost);

        // Codebook pull toward the (frozen) encoder outputs.
        let codebook_var = graph.lease(&codec.store, "codebook")?;
        let selected = graph.gather_rows(codebook_var, indices.clone())?;
        let z_e_const = graph.input(&[batch * codec.spec.n_latents, d_latent], z_e_vals);
        let code_term = graph.sq_diff_mean(selected, z_e_const)?;

        let partial = graph.add(recon, commit_scaled)?;
        let loss = graph.add(partial, code_term)?;
        loss_curve.push(graph.scalar(loss));

        graph.backward(loss)?;
        graph.collect_grads(&mut codec.store);
        adam.step(&mut codec.store)?;

        // Constraint projection after every codebook update.
        {
            let cb = codec.store.get_mut("codebook").expect("codebook");
            clip_codebook(cb.data_mut(), d_latent, cfg.rho);
        }

        // Re-seed codes that have not been selected for a long stretch.
        if cfg.dead_code_steps > 0 && (step + 1) % cfg.dead_code_steps == 0 {
            let threshold = (step + 1).saturating_sub(cfg.dead_code_steps);
            let mut replacements: Vec<(usize, Vec<f32>)> = Vec::new();
            {
                let z_e_rows = graph.value(z_e);
                let n_rows = z_e_rows.len() / d_latent;
                for (code_idx, &used) in last_used.iter().enumerate() {
                    if used <= threshold {
                        let r = rng.gen_range(0..n_rows);
                        replacements
                            .push((code_idx, z_e_rows[r * d_latent..(r + 1) * d_latent].to_vec()));
                    }
                }
            }
            if !replacements.is_empty() {
                let cb = codec.store.get_mut("codebook").expect("codebook");
                for (code_idx, row) in &replacements {
                    cb.data_mut()[code_idx * d_latent..(code_idx + 1) * d_latent]
                        .copy_from_slice(row);
                    last_used[*code_idx] = step + 1;
                }
                clip_codebook(cb.data_mut(), d_latent, cfg.rho);
                reseeded += replacements.len();
            }
        }
    }

    // Held-out reconstruction error through the full encode-quantize-decode
    // path, in normalized space.
    let z_e = codec.encode_batch_normalized(&held_rows.iter().map(|r| (*r).clone()).collect::<Vec<_>>())?;
    let (z_q, _) = codec.quantize(&z_e);
    let recon = codec.decode_batch_normalized(&z_q)?;
    let mut se = 0.0f64;
    for (row, rec) in held_rows.iter().zip(recon.chunks(dim)) {
        for (a, b) in row.iter().zip(rec) {
            se += ((a - b) as f64).powi(2);
        }
    }
    let holdout_mse = se / (held_rows.len() * dim) as f64;

    let max_code_norm_sq = codec
        .codebook()
        .chunks(d_latent)
        .map(|c| c.iter().map(|&v| v * v).sum::<f32>())
        .fold(0.0f32, f32::max);

    Ok(QsaTrainReport {
        loss_curve,
        holdout_mse,
        reseeded_codes: reseeded,
        max_code_norm_sq,
    })
}
