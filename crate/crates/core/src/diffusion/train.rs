//! Per-task diffuser training on aligned feature sequences.

use rand::Rng;

use super::model::Diffuser;
use super::unet::GateMap;
use crate::error::{Result, VqcdError};
use crate::qsa::TaskCodecs;
use crate::rng::Prng;
use crate::suite::{discounted_return, Dataset};
use crate::tensor::{AdamState, Graph, ParameterStore};

/// Windows of concatenated aligned features with normalized window returns.
pub struct SequenceDataset {
    pub task_id: usize,
    pub feature_width: usize,
    pub state_width: usize,
    pub seq_len: usize,
    /// Each window flattened as [C, T] row-major.
    windows: Vec<Vec<f32>>,
    /// Window condition values in [0, 1]: the empirical quantile of the
    /// window's discounted return within the task dataset. Rank scaling
    /// keeps both ends of the condition range in-distribution under
    /// heavily skewed raw returns and gives a fixed target the same
    /// meaning across tasks with incommensurate reward scales.
    returns: Vec<f32>,
    pub ret_min: f64,
    pub ret_max: f64,
}

/// Empirical-quantile map onto [0, 1]; ties share the midpoint rank.
fn quantile_normalize(values: &[f64]) -> Vec<f32> {
    let n = values.len();
    if n <= 1 {
        return vec![0.5; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0f32; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0;
        let q = (rank / (n - 1) as f64) as f32;
        for &idx in &order[i..=j] {
            out[idx] = q;
        }
        i = j + 1;
    }
    out
}

impl SequenceDataset {
    /// Assemble a window set from already-aligned per-window features.
    /// `windows` entries are `[C, T]` row-major with `C = feature_width`.
    pub fn from_parts(
        task_id: usize,
        feature_width: usize,
        state_width: usize,
        seq_len: usize,
        windows: Vec<Vec<f32>>,
        raw_returns: Vec<f64>,
    ) -> Result<SequenceDataset> {
        if windows.is_empty() || windows.len() != raw_returns.len() {
            return Err(VqcdError::config(
                "window set must be non-empty with one return per window",
            ));
        }
        for w in &windows {
            if w.len() != feature_width * seq_len {
                return Err(VqcdError::ShapeMismatch {
                    op: "sequence_dataset",
                    expected: vec![feature_width, seq_len],
                    got: vec![w.len()],
                });
            }
        }
        let ret_min = raw_returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let ret_max = raw_returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let returns = quantile_normalize(&raw_returns);
        Ok(SequenceDataset {
            task_id,
            feature_width,
            state_width,
            seq_len,
            windows,
            returns,
            ret_min,
            ret_max,
        })
    }

    /// Slice a dataset into length-`seq_len` windows of aligned features.
    /// The condition of a window is the within-dataset quantile of its
    /// gamma-discounted return.
    pub fn build(
        dataset: &Dataset,
        codecs: &TaskCodecs,
        seq_len: usize,
        gamma: f64,
    ) -> Result<SequenceDataset> {
        let state_width = codecs.state.aligned_dim();
        let action_width = codecs.action.aligned_dim();
        let width = state_width + action_width;
        let mut windows = Vec::new();
        let mut raw_returns = Vec::new();
        for episode in &dataset.episodes {
            let len = episode.len();
            if len < seq_len {
                continue;
            }
            // Encode the whole episode once per modality.
            let state_refs: Vec<&[f32]> = episode.states[..len].iter().map(|s| s.as_slice()).collect();
            let action_refs: Vec<&[f32]> = episode.actions.iter().map(|a| a.as_slice()).collect();
            let s_ze = codecs.state.encode_batch(&state_refs)?;
            let (s_zq, _) = codecs.state.quantize(&s_ze);
            let a_ze = codecs.action.encode_batch(&action_refs)?;
            let (a_zq, _) = codecs.action.quantize(&a_ze);
            for t0 in 0..=(len - seq_len) {
                let mut w = vec![0.0f32; width * seq_len];
                for (dt, t) in (t0..t0 + seq_len).enumerate() {
                    for c in 0..state_width {
                        w[c * seq_len + dt] = s_zq[t * state_width + c];
                    }
                    for c in 0..action_width {
                        w[(state_width + c) * seq_len + dt] = a_zq[t * action_width + c];
                    }
                }
                windows.push(w);
                raw_returns.push(discounted_return(&episode.rewards, t0, seq_len, gamma)?);
            }
        }
        if windows.is_empty() {
            return Err(VqcdError::config(
                "dataset produced no training windows (episodes shorter than the sequence length)",
            ));
        }
        let ret_min = raw_returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let ret_max = raw_returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let returns = quantile_normalize(&raw_returns);
        Ok(SequenceDataset {
            task_id: dataset.header.task.id,
            feature_width: width,
            state_width,
            seq_len,
            windows,
            returns,
            ret_min,
            ret_max,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, i: usize) -> (&[f32], f32) {
        (&self.windows[i], self.returns[i])
    }
}

#[derive(Debug, Clone)]
pub struct SwaTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub cond_dropout: f64,
}

impl Default for SwaTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            lr: 3e-4,
            cond_dropout: 0.25,
        }
    }
}

/// Run `steps` dense Adam updates of the denoising loss under the task's
/// gates (or none, for the shared-weights finetune baseline). The optimizer
/// state starts fresh, so weights whose gradient is identically zero stay
/// bit-identical throughout. Returns the per-step loss curve.
pub fn train_task(
    diffuser: &Diffuser,
    store: &mut ParameterStore,
    gates: Option<&GateMap>,
    data: &SequenceDataset,
    cfg: &SwaTrainConfig,
    rng: &mut Prng,
) -> Result<Vec<f32>> {
    if data.feature_width != diffuser.unet.cfg.in_channels
        || data.seq_len != diffuser.unet.cfg.seq_len
    {
        return Err(VqcdError::ShapeMismatch {
            op: "train_task",
            expected: vec![diffuser.unet.cfg.in_channels, diffuser.unet.cfg.seq_len],
            got: vec![data.feature_width, data.seq_len],
        });
    }
    let batch = cfg.batch.max(1).min(data.len());
    let n = diffuser.feature_len();
    let mut adam = AdamState::new(cfg.lr);
    let mut graph: Graph<f32> = Graph::new();
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut x0 = vec![0.0f32; batch * n];
    let mut conds = vec![0.0f32; batch];
    for _ in 0..cfg.steps {
        for b in 0..batch {
            let i = rng.gen_range(0..data.len());
            let (w, r) = data.window(i);
            x0[b * n..(b + 1) * n].copy_from_slice(w);
            conds[b] = r;
        }
        graph.clear();
        let loss = diffuser.diffusion_loss(
            &mut graph,
            store,
            gates,
            &x0,
            batch,
            &conds,
            cfg.cond_dropout,
            rng,
        )?;
        curve.push(graph.scalar(loss));
        graph.backward(loss)?;
        graph.collect_grads(store);
        adam.step(store)?;
    }
    Ok(curve)
}
