//! Evaluation metrics: windowed discounted returns, normalized scores,
//! closed-loop rollouts, and the per-task evaluation matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LinearGaussianEnv, TaskSpec};
use crate::error::{Result, VqcdError};

/// Sum of `gamma^u * r[t+u]` over a window of `t_e` steps.
pub fn discounted_return(rewards: &[f32], t: usize, t_e: usize, gamma: f64) -> Result<f64> {
    if t + t_e > rewards.len() {
        return Err(VqcdError::config(format!(
            "return window [{t}, {}) exceeds horizon {}",
            t + t_e,
            rewards.len()
        )));
    }
    let mut acc = 0.0f64;
    let mut g = 1.0f64;
    for &r in &rewards[t..t + t_e] {
        acc += g * r as f64;
        g *= gamma;
    }
    Ok(acc)
}

/// Undiscounted episodic return.
pub fn episode_return(rewards: &[f32]) -> f64 {
    rewards.iter().map(|&r| r as f64).sum()
}

/// Cross-task performance scale: `(R - R_random) / (R_expert - R_random) * 100`.
pub fn normalized_score(r: f64, r_random: f64, r_expert: f64) -> Result<f64> {
    let gap = r_expert - r_random;
    if gap.abs() < 1e-12 {
        return Err(VqcdError::config(
            "degenerate reference returns: R_expert == R_random",
        ));
    }
    Ok((r - r_random) / gap * 100.0)
}

/// Mean and spread of a batch of evaluation rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// One closed-loop episode driven by `act`.
pub fn run_episode<F>(
    env: &mut LinearGaussianEnv,
    episode_seed: u64,
    mut act: F,
) -> Result<f64>
where
    F: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    let mut s = env.reset(episode_seed);
    let mut ret = 0.0f64;
    loop {
        let a = act(&s)?;
        let (ns, r, done) = env.step(&a)?;
        ret += r as f64;
        s = ns;
        if done {
            return Ok(ret);
        }
    }
}

/// Closed-loop evaluation over `n_episodes` independent episodes.
///
/// `make_actor` builds a fresh per-episode actor from the episode index, so
/// episodes can run on parallel workers while staying bitwise reproducible:
/// episode `i` always uses seed `base_seed + i` and its own actor state.
pub fn rollout_eval<F, A>(
    task: &TaskSpec,
    n_episodes: usize,
    base_seed: u64,
    make_actor: F,
) -> Result<EvalSummary>
where
    F: Fn(usize) -> Result<A> + Sync,
    A: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    let returns: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let mut env = LinearGaussianEnv::new(task)?;
            let actor = make_actor(ep)?;
            run_episode(&mut env, base_seed.wrapping_add(ep as u64), actor)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalSummary {
        mean,
        std: var.sqrt(),
        returns,
    })
}

/// I x I table: entry `(i, j)` is the mean evaluation return on task `j`
/// after finishing training on task `i`. Row indices follow training order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsMatrix {
    n_tasks: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl MetricsMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            entries: vec![vec![None; n_tasks]; n_tasks],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn set(&mut self, after_task: usize, eval_task: usize, value: f64) {
        self.entries[after_task][eval_task] = Some(value);
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        self.entries[after_task][eval_task]
    }

    pub fn final_row(&self) -> &[Option<f64>] {
        &self.entries[self.n_tasks - 1]
    }

    /// Mean of the final row; every entry must be populated.
    pub fn final_performance(&self) -> Result<f64> {
        let row = self.final_row();
        let mut sum = 0.0;
        for (j, v) in row.iter().enumerate() {
            sum += v.ok_or_else(|| {
                VqcdError::invariant(format!("final row missing evaluation for task {j}"))
            })?;
        }
        Ok(sum / self.n_tasks as f64)
    }

    /// Forgetting of task `j`: return right after training task `j` minus
    /// return at the end of the sequence.
    pub fn forgetting(&self, j: usize) -> Result<f64> {
        let diag = self.entries[j][j].ok_or_else(|| {
            VqcdError::invariant(format!("matrix missing diagonal entry for task {j}"))
        })?;
        let last = self.entries[self.n_tasks - 1][j].ok_or_else(|| {
            VqcdError::invariant(format!("matrix missing final-row entry for task {j}"))
        })?;
        Ok(diag - last)
    }

    pub fn forgetting_all(&self) -> Result<Vec<f64>> {
        (0..self.n_tasks).map(|j| self.forgetting(j)).collect()
    }
}
