//! Space alignment front-end and the closed-loop evaluation policy:
//! encode the current state, inpaint it into a guided DDIM generation,
//! then decode the first action (directly or through inverse dynamics).

use crate::diffusion::{ddim_sample, Diffuser, GateMap, Inpaint, InverseDynamics, SamplerConfig};
use crate::error::{Result, VqcdError};
use crate::qsa::{pad_align, TaskCodecs};
use crate::rng::Prng;
use crate::tensor::ParameterStore;

/// Per-dimension affine map onto [-1, 1] used by the padding aligner.
#[derive(Debug, Clone)]
pub struct MinMax {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl MinMax {
    fn normalize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = (self.lo[d], self.hi[d]);
                if hi - lo < 1e-9 {
                    0.0
                } else {
                    ((v - lo) / (hi - lo)).mul_add(2.0, -1.0).clamp(-1.0, 1.0)
                }
            })
            .collect()
    }

    fn denormalize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = (self.lo[d], self.hi[d]);
                if hi - lo < 1e-9 {
                    lo
                } else {
                    (v + 1.0) / 2.0 * (hi - lo) + lo
                }
            })
            .collect()
    }
}

/// Zero-padding alignment onto the largest task dimensions.
pub struct PadAligner {
    pub task_id: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub d_s_max: usize,
    pub d_a_max: usize,
    pub state_norm: MinMax,
    pub action_norm: MinMax,
}

/// One task's view of the shared aligned feature space.
pub enum Aligner {
    Vq(TaskCodecs),
    Pad(PadAligner),
}

impl Aligner {
    pub fn task_id(&self) -> usize {
        match self {
            Aligner::Vq(c) => c.state.spec.task_id,
            Aligner::Pad(p) => p.task_id,
        }
    }

    pub fn state_width(&self) -> usize {
        match self {
            Aligner::Vq(c) => c.state.aligned_dim(),
            Aligner::Pad(p) => p.d_s_max,
        }
    }

    pub fn action_width(&self) -> usize {
        match self {
            Aligner::Vq(c) => c.action.aligned_dim(),
            Aligner::Pad(p) => p.d_a_max,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.state_width() + self.action_width()
    }

    pub fn align_state(&self, s: &[f32]) -> Result<Vec<f32>> {
        match self {
            Aligner::Vq(c) => c.state.align(s),
            Aligner::Pad(p) => {
                if s.len() != p.d_s {
                    return Err(VqcdError::TaskDimension {
                        task: p.task_id,
                        what: "state",
                        expected: p.d_s,
                        got: s.len(),
                    });
                }
                pad_align(&p.state_norm.normalize(s), p.d_s_max)
            }
        }
    }

    pub fn align_action(&self, a: &[f32]) -> Result<Vec<f32>> {
        match self {
            Aligner::Vq(c) => c.action.align(a),
            Aligner::Pad(p) => {
                if a.len() != p.d_a {
                    return Err(VqcdError::TaskDimension {
                        task: p.task_id,
                        what: "action",
                        expected: p.d_a,
                        got: a.len(),
                    });
                }
                pad_align(&p.action_norm.normalize(a), p.d_a_max)
            }
        }
    }

    /// Map a generated action feature back to the task's native space.
    pub fn decode_action(&self, feature: &[f32]) -> Result<Vec<f32>> {
        match self {
            Aligner::Vq(c) => c.action.decode_via_codes(feature),
            Aligner::Pad(p) => Ok(p.action_norm.denormalize(&feature[..p.d_a])),
        }
    }

    /// Map a generated state feature back to the task's native space.
    pub fn decode_state(&self, feature: &[f32]) -> Result<Vec<f32>> {
        match self {
            Aligner::Vq(c) => c.state.decode_via_codes(feature),
            Aligner::Pad(p) => Ok(p.state_norm.denormalize(&feature[..p.d_s])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionDecode {
    Joint,
    Idm,
}

/// Closed-loop policy over the trained diffuser.
pub struct PolicyAgent<'a> {
    pub diffuser: &'a Diffuser,
    pub store: &'a ParameterStore,
    pub gates: Option<&'a GateMap>,
    pub aligner: &'a Aligner,
    pub idm: Option<&'a InverseDynamics>,
    pub sampler: SamplerConfig,
    pub target_return: f32,
    pub mode: ActionDecode,
    pub action_bound: f32,
    pub rng: Prng,
}

impl PolicyAgent<'_> {
    pub fn act(&mut self, state: &[f32]) -> Result<Vec<f32>> {
        let s_feat = self.aligner.align_state(state)?;
        let (tau, _) = ddim_sample(
            self.diffuser,
            self.store,
            self.gates,
            Some(self.target_return),
            &self.sampler,
            Some(Inpaint {
                state_feature: &s_feat,
            }),
            &mut self.rng,
        )?;
        let seq = self.diffuser.unet.cfg.seq_len;
        let sw = self.aligner.state_width();
        let aw = self.aligner.action_width();
        let action = match self.mode {
            ActionDecode::Joint => {
                // Action feature at sequence position 0.
                let feat: Vec<f32> = (0..aw).map(|c| tau[(sw + c) * seq]).collect();
                self.aligner.decode_action(&feat)?
            }
            ActionDecode::Idm => {
                let idm = self.idm.ok_or_else(|| {
                    VqcdError::PipelineOrder {
                        what: "idm action decoding",
                        missing: "trained inverse dynamics model".into(),
                    }
                })?;
                // Predicted next state feature at sequence position 1.
                let feat: Vec<f32> = (0..sw).map(|c| tau[c * seq + 1]).collect();
                let next_state = self.aligner.decode_state(&feat)?;
                idm.predict(state, &next_state)?
            }
        };
        Ok(action
            .iter()
            .map(|&v| v.clamp(-self.action_bound, self.action_bound))
            .collect())
    }
}
