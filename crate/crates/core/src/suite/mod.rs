//! Synthetic heterogeneous continual-task family.
//!
//! Linear-Gaussian environments with per-task state/action dimensions stand
//! in for large control benchmarks: they are cheap, analytically
//! controllable, and realize the heterogeneous-spaces premise exactly.

mod dataset;
mod env;
mod metrics;
mod policy;

pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetHeader, Episode};
pub use env::LinearGaussianEnv;
pub use metrics::{
    discounted_return, episode_return, normalized_score, rollout_eval, run_episode, EvalSummary,
    MetricsMatrix,
};
pub use policy::{Policy, Quality};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqcdError};

/// A continual task's dimensions, dynamics seed, and reward scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub horizon: usize,
    pub dynamics_seed: u64,
    /// Process noise standard deviation.
    pub noise_std: f32,
    /// Actions are clipped to [-action_bound, action_bound].
    pub action_bound: f32,
    /// Reward is `-reward_scale * ||s||^2`.
    pub reward_scale: f32,
    /// Mean return of the pure random policy, filled at dataset generation.
    #[serde(default)]
    pub r_random: Option<f64>,
    /// Mean return of the pure expert policy, filled at dataset generation.
    #[serde(default)]
    pub r_expert: Option<f64>,
}

impl TaskSpec {
    pub fn new(id: usize, d_s: usize, d_a: usize, dynamics_seed: u64) -> Self {
        Self {
            id,
            d_s,
            d_a,
            horizon: 50,
            dynamics_seed,
            noise_std: 0.05,
            action_bound: 1.0,
            reward_scale: 1.0,
            r_random: None,
            r_expert: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.d_a == 0 {
            return Err(VqcdError::config(format!(
                "task {}: state and action dims must be >= 1",
                self.id
            )));
        }
        if self.horizon == 0 {
            return Err(VqcdError::config(format!("task {}: empty horizon", self.id)));
        }
        if let (Some(r), Some(e)) = (self.r_random, self.r_expert) {
            if e <= r {
                return Err(VqcdError::invariant(format!(
                    "task {}: expert reference return {e} must exceed random {r}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Reference-return gap, if both references are known.
    pub fn return_gap(&self) -> Option<f64> {
        match (self.r_random, self.r_expert) {
            (Some(r), Some(e)) => Some(e - r),
            _ => None,
        }
    }

    /// The default heterogeneous 3-task sequence.
    pub fn suite3(base_seed: u64) -> Vec<TaskSpec> {
        vec![
            TaskSpec::new(0, 3, 1, base_seed.wrapping_add(101)),
            TaskSpec::new(1, 5, 2, base_seed.wrapping_add(202)),
            TaskSpec::new(2, 7, 3, base_seed.wrapping_add(303)),
        ]
    }

    /// A longer 6-task sequence with alternating dimensions.
    pub fn suite6(base_seed: u64) -> Vec<TaskSpec> {
        let dims = [(3, 1), (4, 2), (5, 2), (6, 3), (7, 3), (8, 4)];
        dims.iter()
            .enumerate()
            .map(|(i, &(d_s, d_a))| {
                TaskSpec::new(i, d_s, d_a, base_seed.wrapping_add(101 * (i as u64 + 1)))
            })
            .collect()
    }
}
