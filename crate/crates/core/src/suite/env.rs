//! Linear-Gaussian environment: `s' = A s + B a + noise_std * eta`,
//! reward `-reward_scale * ||s'||^2`.
//!
//! `A = Q D Q^T` with `Q` orthogonal (Gram-Schmidt on a seeded Gaussian
//! matrix) and `D` diagonal with largest magnitude 0.95, so the spectral
//! radius is 0.95 by construction. All dynamics math runs in `f64`;
//! trajectories are recorded in `f32`.

use rand::Rng;

use super::TaskSpec;
use crate::error::{Result, VqcdError};
use crate::rng::{normal, substream, Prng};

#[derive(Debug, Clone)]
pub struct LinearGaussianEnv {
    spec: TaskSpec,
    /// Row-major d_s x d_s.
    a: Vec<f64>,
    /// Row-major d_s x d_a.
    b: Vec<f64>,
    state: Vec<f64>,
    noise: Prng,
    steps: usize,
}

impl LinearGaussianEnv {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let (d_s, d_a) = (spec.d_s, spec.d_a);
        let mut rng = substream(spec.dynamics_seed, &[0xD1]);

        // Orthogonal Q via Gram-Schmidt on a random Gaussian matrix.
        let mut q = vec![0.0f64; d_s * d_s];
        for col in 0..d_s {
            let mut v: Vec<f64> = (0..d_s).map(|_| normal(&mut rng)).collect();
            for prev in 0..col {
                let dot: f64 = (0..d_s).map(|r| v[r] * q[r * d_s + prev]).sum();
                for r in 0..d_s {
                    v[r] -= dot * q[r * d_s + prev];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for r in 0..d_s {
                q[r * d_s + col] = v[r] / norm;
            }
        }
        // Eigenvalues: one at exactly 0.95, the rest slow enough that
        // uncontrolled excursions persist across many steps.
        let mut eigs = vec![0.0f64; d_s];
        eigs[0] = 0.95;
        for e in eigs.iter_mut().skip(1) {
            let mag = rng.gen_range(0.5..0.95);
            *e = if rng.gen_bool(0.5) { mag } else { -mag };
        }
        let mut a = vec![0.0f64; d_s * d_s];
        for r in 0..d_s {
            for c in 0..d_s {
                let mut s = 0.0;
                for k in 0..d_s {
                    s += q[r * d_s + k] * eigs[k] * q[c * d_s + k];
                }
                a[r * d_s + c] = s;
            }
        }
        let b: Vec<f64> = (0..d_s * d_a).map(|_| normal(&mut rng)).collect();

        Ok(Self {
            spec: spec.clone(),
            a,
            b,
            state: vec![0.0; d_s],
            noise: substream(spec.dynamics_seed, &[0xE0]),
            steps: 0,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn a_matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn b_matrix(&self) -> &[f64] {
        &self.b
    }

    /// Start an episode from a random direction at fixed radius
    /// `sqrt(d_s)`, with a noise stream derived from `episode_seed`;
    /// identical seeds replay identical episodes.
    pub fn reset(&mut self, episode_seed: u64) -> Vec<f32> {
        self.noise = substream(self.spec.dynamics_seed, &[0xE0, episode_seed]);
        let mut dir: Vec<f64> = (0..self.spec.d_s).map(|_| normal(&mut self.noise)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        let radius = (self.spec.d_s as f64).sqrt();
        for v in dir.iter_mut() {
            *v *= radius / norm;
        }
        self.state = dir;
        self.steps = 0;
        self.observe()
    }

    /// Start an episode from an explicit state; the noise stream still
    /// derives from `episode_seed`.
    pub fn reset_to(&mut self, state: &[f32], episode_seed: u64) -> Result<Vec<f32>> {
        if state.len() != self.spec.d_s {
            return Err(VqcdError::TaskDimension {
                task: self.spec.id,
                what: "state",
                expected: self.spec.d_s,
                got: state.len(),
            });
        }
        self.noise = substream(self.spec.dynamics_seed, &[0xE0, episode_seed]);
        self.state = state.iter().map(|&v| v as f64).collect();
        self.steps = 0;
        Ok(self.observe())
    }

    pub fn observe(&self) -> Vec<f32> {
        self.state.iter().map(|&v| v as f32).collect()
    }

    pub fn done(&self) -> bool {
        self.steps >= self.spec.horizon
    }

    /// Advance one step. Actions are clipped to the task's bounds.
    pub fn step(&mut self, action: &[f32]) -> Result<(Vec<f32>, f32, bool)> {
        let (d_s, d_a) = (self.spec.d_s, self.spec.d_a);
        if action.len() != d_a {
            return Err(VqcdError::TaskDimension {
                task: self.spec.id,
                what: "action",
                expected: d_a,
                got: action.len(),
            });
        }
        let bound = self.spec.action_bound as f64;
        let act: Vec<f64> = action
            .iter()
            .map(|&v| (v as f64).clamp(-bound, bound))
            .collect();
        let mut next = vec![0.0f64; d_s];
        for r in 0..d_s {
            let mut s = 0.0;
            for c in 0..d_s {
                s += self.a[r * d_s + c] * self.state[c];
            }
            for c in 0..d_a {
                s += self.b[r * d_a + c] * act[c];
            }
            s += self.spec.noise_std as f64 * normal(&mut self.noise);
            next[r] = s;
        }
        self.state = next;
        self.steps += 1;
        let cost: f64 = self.state.iter().map(|x| x * x).sum();
        let reward = (-(self.spec.reward_scale as f64) * cost) as f32;
        Ok((self.observe(), reward, self.done()))
    }
}
