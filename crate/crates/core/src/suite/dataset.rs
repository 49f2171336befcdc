//! Offline dataset generation and the text-lines container format.
//!
//! A dataset file is UTF-8 text: the first line is a JSON header record,
//! every following line is one JSON episode object. See `docs/formats.md`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LinearGaussianEnv, Policy, Quality, TaskSpec};
use crate::error::{Result, VqcdError};
use crate::rng::substream;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub rewards: Vec<f32>,
    pub terminals: Vec<bool>,
    pub quality: Quality,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.rewards.len();
        // `states` holds h+1 entries: s_0 .. s_h.
        if self.states.len() != h + 1 || self.actions.len() != h || self.terminals.len() != h {
            return Err(VqcdError::invariant(format!(
                "episode arrays inconsistent: states {}, actions {}, rewards {}, terminals {}",
                self.states.len(),
                self.actions.len(),
                h,
                self.terminals.len()
            )));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(VqcdError::invariant("non-finite reward in episode"));
        }
        Ok(())
    }
}

/// Header record: task spec, normalization constants, reference returns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: TaskSpec,
    pub state_min: Vec<f32>,
    pub state_max: Vec<f32>,
    pub action_min: Vec<f32>,
    pub action_max: Vec<f32>,
    pub r_random: f64,
    pub r_expert: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    /// All states (including terminal observations) as flat rows.
    pub fn state_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.episodes
            .iter()
            .flat_map(|e| e.states.iter().map(|s| s.as_slice()))
    }

    pub fn action_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.episodes
            .iter()
            .flat_map(|e| e.actions.iter().map(|a| a.as_slice()))
    }
}

fn mean_policy_return(env: &mut LinearGaussianEnv, quality: Quality, episodes: usize, seed: u64) -> f64 {
    let policy = Policy::new(env, quality);
    let mut total = 0.0f64;
    for ep in 0..episodes {
        let mut rng = substream(seed, &[0xBE, quality as u64, ep as u64]);
        let mut s = env.reset(seed ^ (0xACE0 + ep as u64));
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

/// Roll out scripted policies and produce a dataset with the requested
/// quality mix. The reference returns `r_random`/`r_expert` are the mean
/// returns of the pure policies measured on 100 fresh episodes.
pub fn generate_dataset(
    task: &TaskSpec,
    mix: &[(Quality, f64)],
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    task.validate()?;
    if n_episodes == 0 {
        return Err(VqcdError::config("n_episodes must be >= 1"));
    }
    let total: f64 = mix.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(VqcdError::config(format!(
            "mix fractions must sum to 1, got {total}"
        )));
    }
    if mix.iter().any(|(_, f)| *f < 0.0) {
        return Err(VqcdError::config("mix fractions must be non-negative"));
    }

    let mut env = LinearGaussianEnv::new(task)?;
    let r_random = mean_policy_return(&mut env, Quality::Random, 100, seed);
    let r_expert = mean_policy_return(&mut env, Quality::Expert, 100, seed);

    // Integer episode counts per quality; leftovers go to the first entries.
    let mut counts: Vec<usize> = mix
        .iter()
        .map(|(_, f)| (f * n_episodes as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut i = 0;
    let n_qualities = counts.len();
    while assigned < n_episodes {
        counts[i % n_qualities] += 1;
        assigned += 1;
        i += 1;
    }

    let mut episodes = Vec::with_capacity(n_episodes);
    let mut ep_index = 0u64;
    for ((quality, _), count) in mix.iter().zip(&counts) {
        let policy = Policy::new(&env, *quality);
        for _ in 0..*count {
            let mut rng = substream(seed, &[0xDA, *quality as u64, ep_index]);
            let mut s = env.reset(seed.wrapping_add(1 + ep_index));
            let mut episode = Episode {
                states: vec![s.clone()],
                actions: Vec::new(),
                rewards: Vec::new(),
                terminals: Vec::new(),
                quality: *quality,
            };
            loop {
                let a = policy.act(&s, &mut rng);
                let (ns, r, done) = env.step(&a)?;
                episode.actions.push(a);
                episode.rewards.push(r);
                episode.terminals.push(done);
                episode.states.push(ns.clone());
                s = ns;
                if done {
                    break;
                }
            }
            episode.validate()?;
            episodes.push(episode);
            ep_index += 1;
        }
    }

    let d_s = task.d_s;
    let d_a = task.d_a;
    let mut state_min = vec![f32::INFINITY; d_s];
    let mut state_max = vec![f32::NEG_INFINITY; d_s];
    let mut action_min = vec![f32::INFINITY; d_a];
    let mut action_max = vec![f32::NEG_INFINITY; d_a];
    for e in &episodes {
        for s in &e.states {
            for (d, &v) in s.iter().enumerate() {
                state_min[d] = state_min[d].min(v);
                state_max[d] = state_max[d].max(v);
            }
        }
        for a in &e.actions {
            for (d, &v) in a.iter().enumerate() {
                action_min[d] = action_min[d].min(v);
                action_max[d] = action_max[d].max(v);
            }
        }
    }

    let mut task = task.clone();
    task.r_random = Some(r_random);
    task.r_expert = Some(r_expert);
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_FORMAT_VERSION,
            task,
            state_min,
            state_max,
            action_min,
            action_max,
            r_random,
            r_expert,
            seed,
        },
        episodes,
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| VqcdError::io(dir.display().to_string(), e))?;
    }
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&dataset.header)?);
    out.push('\n');
    for e in &dataset.episodes {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| VqcdError::io(path.display().to_string(), e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file =
        std::fs::File::open(path).map_err(|e| VqcdError::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| VqcdError::Format {
            what: "dataset",
            path: path.display().to_string(),
            detail: "empty file".into(),
        })?
        .map_err(|e| VqcdError::io(path.display().to_string(), e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(VqcdError::Format {
            what: "dataset",
            path: path.display().to_string(),
            detail: format!("unsupported version {}", header.version),
        });
    }
    let mut episodes = Vec::new();
    for line in lines {
        let line = line.map_err(|e| VqcdError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(&line)?;
        e.validate()?;
        episodes.push(e);
    }
    Ok(Dataset { header, episodes })
}
