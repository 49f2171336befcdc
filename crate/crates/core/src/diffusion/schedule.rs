//! Cosine noise schedule and the elementary diffusion steps.
//!
//! Index convention: arrays run over `k = 0..=k_max` with `alpha_bar[0] = 1`,
//! so `posterior_var[1] = 0` and the terminal denoising step adds no noise.

use crate::error::{Result, VqcdError};
use crate::rng::{normal_f32, Prng};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    k_max: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `(1 - alpha_bar[k-1]) / (1 - alpha_bar[k]) * beta[k]`.
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008`; betas clamped to 0.999.
    pub fn cosine(k_max: usize) -> Result<Self> {
        if k_max < 1 {
            return Err(VqcdError::config("diffusion steps must be >= 1"));
        }
        let s = 0.008f64;
        let f = |k: f64| {
            let x = (k / k_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha = vec![1.0f64; k_max + 1];
        let mut beta = vec![0.0f64; k_max + 1];
        let mut alpha_bar = vec![1.0f64; k_max + 1];
        let mut prev_bar = 1.0f64;
        for k in 1..=k_max {
            let bar = (f(k as f64) / f0).clamp(1e-12, 1.0);
            let b = (1.0 - bar / prev_bar).clamp(0.0, 0.999);
            beta[k] = b;
            alpha[k] = 1.0 - b;
            // Recompute the running product so alpha_bar stays an exact
            // product of the clamped alphas.
            alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
            prev_bar = bar;
        }
        let mut posterior_var = vec![0.0f64; k_max + 1];
        for k in 1..=k_max {
            posterior_var[k] = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k];
        }
        Ok(Self {
            k_max,
            alpha,
            beta,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn posterior_var(&self, k: usize) -> f64 {
        self.posterior_var[k]
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.k_max {
            return Err(VqcdError::config(format!(
                "diffusion step {k} outside [1, {}]",
                self.k_max
            )));
        }
        Ok(())
    }

    /// `tau_k = sqrt(alpha_bar_k) tau_0 + sqrt(1 - alpha_bar_k) eps`.
    pub fn forward_diffuse(&self, tau0: &[f32], k: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_k(k)?;
        if tau0.len() != eps.len() {
            return Err(VqcdError::ShapeMismatch {
                op: "forward_diffuse",
                expected: vec![tau0.len()],
                got: vec![eps.len()],
            });
        }
        let a = self.alpha_bar[k].sqrt() as f32;
        let b = (1.0 - self.alpha_bar[k]).sqrt() as f32;
        Ok(tau0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| a * x + b * e)
            .collect())
    }

    /// Predicted clean sample from the noise estimate, optionally clamped
    /// to the feature range [-1, 1].
    pub fn predict_clean(&self, tau_k: &[f32], k: usize, eps_hat: &[f32], clamp: bool) -> Vec<f32> {
        let bar = self.alpha_bar[k];
        let a = 1.0 / bar.sqrt();
        let b = (1.0 - bar).sqrt() / bar.sqrt();
        tau_k
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| {
                let x0 = (a * x as f64 - b * e as f64) as f32;
                if clamp {
                    x0.clamp(-1.0, 1.0)
                } else {
                    x0
                }
            })
            .collect()
    }

    /// One ancestral denoising step. Noise is dropped at `k = 1`, where the
    /// posterior variance degenerates to zero.
    pub fn ddpm_step(
        &self,
        tau_k: &[f32],
        k: usize,
        eps_hat: &[f32],
        clamp: bool,
        rng: &mut Prng,
    ) -> Result<Vec<f32>> {
        self.check_k(k)?;
        if tau_k.len() != eps_hat.len() {
            return Err(VqcdError::ShapeMismatch {
                op: "ddpm_step",
                expected: vec![tau_k.len()],
                got: vec![eps_hat.len()],
            });
        }
        let x0 = self.predict_clean(tau_k, k, eps_hat, clamp);
        let bar_prev = self.alpha_bar[k - 1];
        let bar = self.alpha_bar[k];
        // Posterior mean in terms of the clean estimate.
        let c0 = bar_prev.sqrt() * self.beta[k] / (1.0 - bar);
        let ck = self.alpha[k].sqrt() * (1.0 - bar_prev) / (1.0 - bar);
        let sigma = self.posterior_var[k].sqrt();
        let mut out = Vec::with_capacity(tau_k.len());
        for (&xk, &x0e) in tau_k.iter().zip(&x0) {
            let mean = c0 * x0e as f64 + ck * xk as f64;
            let noise = if k > 1 {
                sigma * normal_f32(rng) as f64
            } else {
                0.0
            };
            out.push((mean + noise) as f32);
        }
        Ok(out)
    }

    /// One deterministic (eta = 0) strided step from `k` down to `k_prev`
    /// (`k_prev = 0` lands on the clean sample).
    pub fn ddim_step(
        &self,
        tau_k: &[f32],
        k: usize,
        k_prev: usize,
        eps_hat: &[f32],
        clamp: bool,
    ) -> Result<Vec<f32>> {
        self.check_k(k)?;
        if k_prev >= k {
            return Err(VqcdError::config(format!(
                "ddim step must descend: {k} -> {k_prev}"
            )));
        }
        let x0 = self.predict_clean(tau_k, k, eps_hat, clamp);
        let bar_prev = self.alpha_bar[k_prev];
        let a = bar_prev.sqrt();
        let b = (1.0 - bar_prev).sqrt();
        Ok(x0
            .iter()
            .zip(eps_hat)
            .map(|(&x0e, &e)| (a * x0e as f64 + b * e as f64) as f32)
            .collect())
    }
}

/// Classifier-free combination `(1 - omega) * eps_uncond + omega * eps_cond`,
/// exactly the conditional output at `omega = 1` and the unconditional one
/// at `omega = 0`.
pub fn guided_noise(eps_uncond: &[f32], eps_cond: &[f32], omega: f32) -> Vec<f32> {
    debug_assert_eq!(eps_uncond.len(), eps_cond.len());
    if omega == 1.0 {
        return eps_cond.to_vec();
    }
    if omega == 0.0 {
        return eps_uncond.to_vec();
    }
    eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(&u, &c)| (1.0 - omega) * u + omega * c)
        .collect()
}
