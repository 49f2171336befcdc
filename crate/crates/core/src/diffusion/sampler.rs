//! DDPM and strided deterministic DDIM sampling with classifier-free
//! guidance and state inpainting.

use super::model::Diffuser;
use super::schedule::guided_noise;
use super::unet::GateMap;
use crate::error::{Result, VqcdError};
use crate::rng::{fill_normal_f32, Prng};
use crate::tensor::ParameterStore;

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Stride over diffusion steps; must divide the schedule length.
    pub stride: usize,
    /// Guidance weight.
    pub omega: f32,
    /// Clamp the predicted clean sample to [-1, 1] at every step.
    pub clamp_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            stride: 20,
            omega: 1.2,
            clamp_denoised: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Denoising rounds executed.
    pub rounds: usize,
    /// U-net evaluations (two per round under guidance).
    pub net_evals: usize,
}

/// Observed clean state feature pinned at sequence position 0.
#[derive(Debug, Clone)]
pub struct Inpaint<'a> {
    pub state_feature: &'a [f32],
}

fn write_inpaint(tau: &mut [f32], seq_len: usize, inpaint: &Inpaint<'_>) {
    // Layout [C, T]: channel c at time 0 sits at c * seq_len.
    for (c, &v) in inpaint.state_feature.iter().enumerate() {
        tau[c * seq_len] = v;
    }
}

fn check_inpaint(d: &Diffuser, inpaint: &Option<Inpaint<'_>>) -> Result<()> {
    if let Some(p) = inpaint {
        if p.state_feature.len() > d.unet.cfg.in_channels {
            return Err(VqcdError::ShapeMismatch {
                op: "inpaint",
                expected: vec![d.unet.cfg.in_channels],
                got: vec![p.state_feature.len()],
            });
        }
    }
    Ok(())
}

/// Both guidance passes in one batched forward: row 0 conditional,
/// row 1 unconditional.
fn guided_eval(
    d: &Diffuser,
    store: &ParameterStore,
    gates: Option<&GateMap>,
    tau: &[f32],
    k: usize,
    cond: Option<f32>,
    omega: f32,
    stats: &mut SampleStats,
) -> Result<Vec<f32>> {
    match cond {
        Some(v) => {
            let mut doubled = Vec::with_capacity(tau.len() * 2);
            doubled.extend_from_slice(tau);
            doubled.extend_from_slice(tau);
            let out = d.predict_noise(store, gates, &doubled, 2, &[k, k], &[Some(v), None])?;
            stats.net_evals += 2;
            let (c, u) = out.split_at(tau.len());
            Ok(guided_noise(u, c, omega))
        }
        None => {
            let out = d.predict_noise(store, gates, tau, 1, &[k], &[None])?;
            stats.net_evals += 1;
            Ok(out)
        }
    }
}

/// Deterministic DDIM over the strided step subsequence `{K, K-s, ..., s}`.
/// The initial noise draw is the only use of `rng`.
pub fn ddim_sample(
    d: &Diffuser,
    store: &ParameterStore,
    gates: Option<&GateMap>,
    cond: Option<f32>,
    cfg: &SamplerConfig,
    inpaint: Option<Inpaint<'_>>,
    rng: &mut Prng,
) -> Result<(Vec<f32>, SampleStats)> {
    let k_max = d.schedule.k_max();
    if cfg.stride == 0 || cfg.stride > k_max || k_max % cfg.stride != 0 {
        return Err(VqcdError::config(format!(
            "stride {} must divide diffusion steps {k_max}",
            cfg.stride
        )));
    }
    check_inpaint(d, &inpaint)?;
    let seq_len = d.unet.cfg.seq_len;
    let mut tau = vec![0.0f32; d.feature_len()];
    fill_normal_f32(rng, &mut tau);
    let mut stats = SampleStats::default();
    let mut k = k_max;
    while k >= cfg.stride {
        if let Some(p) = &inpaint {
            write_inpaint(&mut tau, seq_len, p);
        }
        let eps = guided_eval(d, store, gates, &tau, k, cond, cfg.omega, &mut stats)?;
        tau = d
            .schedule
            .ddim_step(&tau, k, k - cfg.stride, &eps, cfg.clamp_denoised)?;
        stats.rounds += 1;
        k -= cfg.stride;
    }
    if let Some(p) = &inpaint {
        write_inpaint(&mut tau, seq_len, p);
    }
    Ok((tau, stats))
}

/// Ancestral sampling over every step `K..1`.
pub fn ddpm_sample(
    d: &Diffuser,
    store: &ParameterStore,
    gates: Option<&GateMap>,
    cond: Option<f32>,
    omega: f32,
    clamp_denoised: bool,
    inpaint: Option<Inpaint<'_>>,
    rng: &mut Prng,
) -> Result<(Vec<f32>, SampleStats)> {
    check_inpaint(d, &inpaint)?;
    let seq_len = d.unet.cfg.seq_len;
    let mut tau = vec![0.0f32; d.feature_len()];
    fill_normal_f32(rng, &mut tau);
    let mut stats = SampleStats::default();
    for k in (1..=d.schedule.k_max()).rev() {
        if let Some(p) = &inpaint {
            write_inpaint(&mut tau, seq_len, p);
        }
        let eps = guided_eval(d, store, gates, &tau, k, cond, omega, &mut stats)?;
        tau = d.schedule.ddpm_step(&tau, k, &eps, clamp_denoised, rng)?;
        stats.rounds += 1;
    }
    if let Some(p) = &inpaint {
        write_inpaint(&mut tau, seq_len, p);
    }
    Ok((tau, stats))
}
