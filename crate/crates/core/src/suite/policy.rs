//! Scripted data-collection policies of graded quality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LinearGaussianEnv;
use crate::rng::{normal, Prng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl Quality {
    pub fn all() -> [Quality; 3] {
        [Quality::Expert, Quality::Medium, Quality::Random]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Random => "random",
        }
    }
}

impl std::str::FromStr for Quality {
    type Err = crate::error::VqcdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "random" => Ok(Quality::Random),
            other => Err(crate::error::VqcdError::config(format!(
                "unknown quality `{other}` (expected expert|medium|random)"
            ))),
        }
    }
}

/// Stabilizing proportional feedback `a = -k * B^T s` plus quality-dependent
/// exploration noise.
#[derive(Debug, Clone)]
pub struct Policy {
    quality: Quality,
    gain: f64,
    /// B^T, row-major d_a x d_s.
    bt: Vec<f64>,
    d_s: usize,
    d_a: usize,
    bound: f64,
    /// Action-noise std for medium quality, as a fraction of the bound.
    medium_noise: f64,
}

impl Policy {
    pub fn new(env: &LinearGaussianEnv, quality: Quality) -> Self {
        let spec = env.spec();
        let (d_s, d_a) = (spec.d_s, spec.d_a);
        let b = env.b_matrix();
        let a = env.a_matrix();
        let mut bt = vec![0.0f64; d_a * d_s];
        for r in 0..d_s {
            for c in 0..d_a {
                bt[c * d_s + r] = b[r * d_a + c];
            }
        }
        // Least-squares optimal scalar gain: argmin_k ||A - k B B^T||_F.
        let mut bbt = vec![0.0f64; d_s * d_s];
        for r in 0..d_s {
            for c in 0..d_s {
                let mut s = 0.0;
                for j in 0..d_a {
                    s += b[r * d_a + j] * b[c * d_a + j];
                }
                bbt[r * d_s + c] = s;
            }
        }
        let num: f64 = a.iter().zip(&bbt).map(|(x, y)| x * y).sum();
        let den: f64 = bbt.iter().map(|x| x * x).sum();
        let gain = if den > 1e-12 { (num / den).max(0.0) } else { 0.0 };
        Self {
            quality,
            gain,
            bt,
            d_s,
            d_a,
            bound: spec.action_bound as f64,
            medium_noise: 0.5,
        }
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    pub fn act(&self, state: &[f32], rng: &mut Prng) -> Vec<f32> {
        debug_assert_eq!(state.len(), self.d_s);
        match self.quality {
            Quality::Random => (0..self.d_a)
                .map(|_| rng.gen_range(-self.bound..=self.bound) as f32)
                .collect(),
            Quality::Expert | Quality::Medium => {
                let mut a = vec![0.0f64; self.d_a];
                for (c, ac) in a.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for r in 0..self.d_s {
                        s += self.bt[c * self.d_s + r] * state[r] as f64;
                    }
                    *ac = -self.gain * s;
                }
                if self.quality == Quality::Medium {
                    for ac in a.iter_mut() {
                        *ac += self.medium_noise * self.bound * normal(rng);
                    }
                }
                a.iter()
                    .map(|&v| v.clamp(-self.bound, self.bound) as f32)
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::suite::TaskSpec;

    fn mean_return(spec: &TaskSpec, quality: Quality, episodes: usize, seed: u64) -> f64 {
        let mut env = LinearGaussianEnv::new(spec).unwrap();
        let policy = Policy::new(&env, quality);
        let mut total = 0.0;
        for ep in 0..episodes {
            let mut rng = substream(seed, &[quality as u64, ep as u64]);
            let mut s = env.reset(seed ^ ep as u64);
            let mut ret = 0.0f64;
            loop {
                let a = policy.act(&s, &mut rng);
                let (ns, r, done) = env.step(&a).unwrap();
                ret += r as f64;
                s = ns;
                if done {
                    break;
                }
            }
            total += ret;
        }
        total / episodes as f64
    }

    #[test]
    fn quality_ordering_is_strict_per_task() {
        for spec in TaskSpec::suite3(410) {
            let e = mean_return(&spec, Quality::Expert, 100, 12);
            let m = mean_return(&spec, Quality::Medium, 100, 12);
            let r = mean_return(&spec, Quality::Random, 100, 12);
            assert!(e > m && m > r, "task {}: e={e:.1} m={m:.1} r={r:.1}", spec.id);
        }
    }

    #[test]
    fn random_actions_stay_in_bounds() {
        let spec = TaskSpec::new(0, 3, 2, 77);
        let env = LinearGaussianEnv::new(&spec).unwrap();
        let policy = Policy::new(&env, Quality::Random);
        let mut rng = substream(5, &[0]);
        for _ in 0..1000 {
            let a = policy.act(&[0.4, -1.0, 2.0], &mut rng);
            assert!(a.iter().all(|&v| v.abs() <= spec.action_bound));
        }
    }

    #[test]
    fn expert_contracts_state_norm_without_noise() {
        let mut spec = TaskSpec::new(0, 4, 2, 3);
        spec.noise_std = 0.0;
        let mut env = LinearGaussianEnv::new(&spec).unwrap();
        let policy = Policy::new(&env, Quality::Expert);
        let mut rng = substream(1, &[0]);
        let mut s = env.reset(9);
        let norm0: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum();
        for _ in 0..spec.horizon {
            let a = policy.act(&s, &mut rng);
            s = env.step(&a).unwrap().0;
        }
        let norm_end: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(
            norm_end < norm0 * 0.05,
            "expected decay: start {norm0}, end {norm_end}"
        );
    }
}
