//! Inverse dynamics: regress the action connecting two consecutive states.
//!
//! A linear head plus a small MLP correction; the linear part makes
//! linear-Gaussian transitions exactly representable.

use rand::Rng;

use crate::error::{Result, VqcdError};
use crate::rng::Prng;
use crate::suite::Dataset;
use crate::tensor::{AdamState, CheckpointMeta, Graph, ParameterStore, Tensor, Var};

pub struct InverseDynamics {
    pub task_id: usize,
    pub d_s: usize,
    pub d_a: usize,
    hidden: usize,
    store: ParameterStore,
}

#[derive(Debug, Clone)]
pub struct IdmTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub hidden: usize,
    /// Decoupled weight decay on the MLP correction branch; the linear
    /// head is left free so affine dynamics stay exactly representable.
    pub weight_decay: f32,
}

impl Default for IdmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 1e-3,
            hidden: 64,
            weight_decay: 0.5,
        }
    }
}

impl InverseDynamics {
    pub fn init(task_id: usize, d_s: usize, d_a: usize, hidden: usize, rng: &mut Prng) -> Self {
        let input = 2 * d_s;
        let mut store = ParameterStore::new();
        store.insert("lin.w", Tensor::zeros(vec![input, d_a]));
        store.insert("lin.b", Tensor::zeros(vec![d_a]));
        store.insert("l1.w", Tensor::kaiming(vec![input, hidden], input, rng));
        store.insert("l1.b", Tensor::zeros(vec![hidden]));
        store.insert("l2.w", Tensor::kaiming(vec![hidden, hidden], hidden, rng));
        store.insert("l2.b", Tensor::zeros(vec![hidden]));
        store.insert("out.w", Tensor::zeros(vec![hidden, d_a]));
        store.insert("out.b", Tensor::zeros(vec![d_a]));
        Self {
            task_id,
            d_s,
            d_a,
            hidden,
            store,
        }
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let lw = g.lease(&self.store, "lin.w")?;
        let lb = g.lease(&self.store, "lin.b")?;
        let linear = g.dense(x, lw, Some(lb))?;
        let w1 = g.lease(&self.store, "l1.w")?;
        let b1 = g.lease(&self.store, "l1.b")?;
        let mut h = g.dense(x, w1, Some(b1))?;
        h = g.mish(h);
        let w2 = g.lease(&self.store, "l2.w")?;
        let b2 = g.lease(&self.store, "l2.b")?;
        h = g.dense(h, w2, Some(b2))?;
        h = g.mish(h);
        let wo = g.lease(&self.store, "out.w")?;
        let bo = g.lease(&self.store, "out.b")?;
        let correction = g.dense(h, wo, Some(bo))?;
        g.add(linear, correction)
    }

    /// Input featurization: the pair enters as [s, s' - s]; the difference
    /// block decorrelates consecutive states.
    fn features(s: &[f32], s_next: &[f32], out: &mut Vec<f32>) {
        out.extend_from_slice(s);
        out.extend(s_next.iter().zip(s).map(|(n, c)| n - c));
    }

    /// Predicted action for a raw state pair of this task.
    pub fn predict(&self, s: &[f32], s_next: &[f32]) -> Result<Vec<f32>> {
        if s.len() != self.d_s || s_next.len() != self.d_s {
            return Err(VqcdError::TaskDimension {
                task: self.task_id,
                what: "idm state pair",
                expected: self.d_s,
                got: if s.len() != self.d_s {
                    s.len()
                } else {
                    s_next.len()
                },
            });
        }
        let mut g: Graph<f32> = Graph::new();
        let mut row = Vec::with_capacity(2 * self.d_s);
        Self::features(s, s_next, &mut row);
        let x = g.input(&[1, 2 * self.d_s], row);
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).to_vec())
    }

    /// Squared-error regression over all dataset transitions.
    pub fn train(&mut self, dataset: &Dataset, cfg: &IdmTrainConfig, rng: &mut Prng) -> Result<f32> {
        let mut inputs: Vec<[usize; 2]> = Vec::new();
        for (e_idx, e) in dataset.episodes.iter().enumerate() {
            for t in 0..e.len() {
                inputs.push([e_idx, t]);
            }
        }
        if inputs.is_empty() {
            return Err(VqcdError::config("no transitions for inverse dynamics"));
        }
        let batch = cfg.batch.min(inputs.len()).max(1);
        let mut adam = AdamState::new(cfg.lr);
        let mut g: Graph<f32> = Graph::new();
        let mut last = 0.0f32;
        for step in 0..cfg.steps {
            // Decay to zero so the regression settles tightly.
            let frac = if cfg.steps > 1 {
                step as f64 / (cfg.steps - 1) as f64
            } else {
                0.0
            };
            adam.lr = (cfg.lr as f64 * (1.0 - frac)) as f32;
            let mut x = Vec::with_capacity(batch * 2 * self.d_s);
            let mut y = Vec::with_capacity(batch * self.d_a);
            for _ in 0..batch {
                let [e_idx, t] = inputs[rng.gen_range(0..inputs.len())];
                let e = &dataset.episodes[e_idx];
                Self::features(&e.states[t], &e.states[t + 1], &mut x);
                y.extend_from_slice(&e.actions[t]);
            }
            g.clear();
            let xin = g.input(&[batch, 2 * self.d_s], x);
            let target = g.input(&[batch, self.d_a], y);
            let pred = self.forward(&mut g, xin)?;
            let loss = g.sq_diff_mean(pred, target)?;
            last = g.scalar(loss);
            g.backward(loss)?;
            g.collect_grads(&mut self.store);
            adam.step(&mut self.store)?;
            if cfg.weight_decay > 0.0 {
                let shrink = 1.0 - cfg.weight_decay * adam.lr;
                for name in ["l1.w", "l2.w", "out.w"] {
                    let t = self.store.get_mut(name).expect("idm tensor");
                    for v in t.data_mut() {
                        *v *= shrink;
                    }
                }
            }
        }
        Ok(last)
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("d_s".into(), self.d_s.to_string());
        extra.insert("d_a".into(), self.d_a.to_string());
        extra.insert("hidden".into(), self.hidden.to_string());
        let meta = CheckpointMeta {
            task_id: Some(self.task_id),
            step: 0,
            seed,
            config_hash: 0,
            extra,
        };
        self.store.save(path, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, meta) = ParameterStore::load(path)?;
        let get = |k: &str| -> Result<usize> {
            meta.extra
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| VqcdError::Format {
                    what: "idm",
                    path: path.display().to_string(),
                    detail: format!("missing {k}"),
                })
        };
        Ok(Self {
            task_id: meta.task_id.unwrap_or(0),
            d_s: get("d_s")?,
            d_a: get("d_a")?,
            hidden: get("hidden")?,
            store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::suite::{Episode, DatasetHeader, Quality, TaskSpec};

    /// Deterministic linear fixture: s' = s + B a with invertible B.
    fn linear_fixture(n_episodes: usize, horizon: usize, seed: u64) -> Dataset {
        let d = 2usize;
        let b = [0.9f32, 0.2, -0.3, 1.1];
        let mut rng = substream(seed, &[0]);
        let mut episodes = Vec::new();
        for _ in 0..n_episodes {
            let mut s = vec![rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)];
            let mut e = Episode {
                states: vec![s.clone()],
                actions: Vec::new(),
                rewards: Vec::new(),
                terminals: Vec::new(),
                quality: Quality::Medium,
            };
            for t in 0..horizon {
                let a = vec![rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)];
                let next = vec![
                    s[0] + b[0] * a[0] + b[1] * a[1],
                    s[1] + b[2] * a[0] + b[3] * a[1],
                ];
                e.actions.push(a);
                e.rewards.push(0.0);
                e.terminals.push(t + 1 == horizon);
                e.states.push(next.clone());
                s = next;
            }
            episodes.push(e);
        }
        let task = TaskSpec::new(0, d, d, seed);
        Dataset {
            header: DatasetHeader {
                version: 1,
                task,
                state_min: vec![-10.0; d],
                state_max: vec![10.0; d],
                action_min: vec![-1.0; d],
                action_max: vec![1.0; d],
                r_random: -1.0,
                r_expert: 0.0,
                seed,
            },
            episodes,
        }
    }

    #[test]
    fn recovers_actions_of_invertible_linear_dynamics() {
        let ds = linear_fixture(150, 8, 5);
        let mut rng = substream(6, &[1]);
        let mut idm = InverseDynamics::init(0, 2, 2, 8, &mut rng);
        let cfg = IdmTrainConfig {
            steps: 20_000,
            batch: 256,
            lr: 2e-3,
            hidden: 8,
            weight_decay: 1.0,
        };
        idm.train(&ds, &cfg, &mut rng).unwrap();
        // Held-out episodes from the same process; the analytic inverse of
        // s' = s + B a is the ground truth.
        let probe = linear_fixture(4, 8, 1234);
        let mut worst = 0.0f32;
        for e in &probe.episodes {
            for t in 0..e.len() {
                let pred = idm.predict(&e.states[t], &e.states[t + 1]).unwrap();
                for (p, truth) in pred.iter().zip(&e.actions[t]) {
                    worst = worst.max((p - truth).abs());
                }
            }
        }
        assert!(worst <= 1e-3, "worst action error {worst}");
    }

    #[test]
    fn stationary_pairs_with_zero_action_data_predict_zero() {
        // All transitions in the fixture keep s' = s with a = 0.
        let d = 3usize;
        let mut episodes = Vec::new();
        let mut rng = substream(8, &[1]);
        for _ in 0..20 {
            let s = vec![
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
            ];
            episodes.push(Episode {
                states: vec![s.clone(); 11],
                actions: vec![vec![0.0; d]; 10],
                rewards: vec![0.0; 10],
                terminals: (0..10).map(|t| t == 9).collect(),
                quality: Quality::Medium,
            });
        }
        let ds = Dataset {
            header: DatasetHeader {
                version: 1,
                task: TaskSpec::new(1, d, d, 0),
                state_min: vec![-1.0; d],
                state_max: vec![1.0; d],
                action_min: vec![-1.0; d],
                action_max: vec![1.0; d],
                r_random: -1.0,
                r_expert: 0.0,
                seed: 0,
            },
            episodes,
        };
        let mut rng = substream(9, &[1]);
        let mut idm = InverseDynamics::init(1, d, d, 32, &mut rng);
        let cfg = IdmTrainConfig {
            steps: 1500,
            batch: 32,
            lr: 1e-3,
            hidden: 32,
            weight_decay: 0.5,
        };
        idm.train(&ds, &cfg, &mut rng).unwrap();
        let s = vec![0.3f32, -0.2, 0.8];
        let pred = idm.predict(&s, &s).unwrap();
        for p in pred {
            assert!(p.abs() < 0.05, "expected near-zero action, got {p}");
        }
    }

    #[test]
    fn output_dimension_matches_task() {
        let mut rng = substream(10, &[1]);
        let idm = InverseDynamics::init(2, 4, 3, 16, &mut rng);
        let out = idm.predict(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(idm.predict(&[0.0; 5], &[0.0; 4]).is_err());
    }

    #[test]
    fn idm_file_round_trips() {
        let mut rng = substream(11, &[1]);
        let idm = InverseDynamics::init(3, 2, 1, 8, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idm.ckpt");
        idm.save(&path, 4).unwrap();
        let loaded = InverseDynamics::load(&path).unwrap();
        assert_eq!(loaded.task_id, 3);
        let a = idm.predict(&[0.4, -0.6], &[0.1, 0.2]).unwrap();
        let b = loaded.predict(&[0.4, -0.6], &[0.1, 0.2]).unwrap();
        assert_eq!(a, b);
    }
}
