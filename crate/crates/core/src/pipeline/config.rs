//! Pipeline configuration: explicit task order, stage hyperparameters, and
//! cross-field validation. Unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqcdError};
use crate::qsa::VqConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Decode the generated action features directly.
    Joint,
    /// Predict actions from consecutive decoded states.
    Idm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// Vector-quantized codecs.
    Vq,
    /// Zero-padding to the largest task dimensions.
    Padding,
}

/// U-net structure knobs exposed to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetParams {
    pub hidden: usize,
    pub groups: usize,
    pub kernel: usize,
    pub sin_dim: usize,
    pub emb_dim: usize,
}

impl Default for UnetParams {
    fn default() -> Self {
        Self {
            hidden: 256,
            groups: 8,
            kernel: 5,
            sin_dim: 16,
            emb_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub hidden: usize,
    pub weight_decay: f32,
}

impl Default for IdmParams {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub eval_seed: u64,
    pub out_dir: String,
    /// Ordered dataset paths, one per task. The order is the training order
    /// and is immutable once a run starts.
    pub datasets: Vec<String>,
    /// Gradient steps per task.
    pub steps_per_task: u64,
    /// Codec pretraining steps per task and modality.
    pub qsa_steps: u64,
    pub vq: VqConfig,
    pub unet: UnetParams,
    pub idm: IdmParams,
    /// Max diffusion step K.
    pub k_max: usize,
    /// DDIM stride; K/stride denoising rounds per generation.
    pub stride: usize,
    /// Guidance weight.
    pub guidance_omega: f32,
    /// Evaluation conditioning value in normalized return space.
    pub target_return: f32,
    pub cond_dropout: f64,
    pub batch: usize,
    pub diffusion_lr: f32,
    pub gamma: f64,
    /// Sequence window length.
    pub seq_len: usize,
    /// Per-task mask fraction; defaults to 1/I.
    pub mask_rate: Option<f64>,
    pub mode: ActionMode,
    pub alignment: Alignment,
    /// Train one shared unmasked model instead (forgetting baseline).
    pub baseline_finetune: bool,
    pub eval_rollouts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            eval_seed: 1000,
            out_dir: "runs/default".into(),
            datasets: Vec::new(),
            steps_per_task: 20_000,
            qsa_steps: 50_000,
            vq: VqConfig::default(),
            unet: UnetParams::default(),
            idm: IdmParams::default(),
            k_max: 200,
            stride: 20,
            guidance_omega: 1.2,
            target_return: 0.95,
            cond_dropout: 0.25,
            batch: 32,
            diffusion_lr: 3e-4,
            gamma: 0.99,
            seq_len: 8,
            mask_rate: None,
            mode: ActionMode::Joint,
            alignment: Alignment::Vq,
            baseline_finetune: false,
            eval_rollouts: 20,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(raw)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| VqcdError::io(path.display().to_string(), e))?;
        Self::from_json(&raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn n_tasks(&self) -> usize {
        self.datasets.len()
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// Effective per-task mask fraction.
    pub fn effective_mask_rate(&self) -> f64 {
        self.mask_rate
            .unwrap_or_else(|| 1.0 / self.n_tasks().max(1) as f64)
    }

    /// FNV-1a over the canonical JSON rendering; tags artifacts.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    /// Field-path-tagged validation of every cross-field constraint.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| {
            Err(VqcdError::config(format!("{field}: {msg}")))
        };
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(
                "schema_version",
                format!(
                    "unsupported version {} (expected {CONFIG_SCHEMA_VERSION})",
                    self.schema_version
                ),
            );
        }
        if self.datasets.is_empty() {
            return fail("datasets", "at least one task dataset is required".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if !Path::new(d).exists() {
                return fail(
                    &format!("datasets[{i}]"),
                    format!("dataset `{d}` does not exist at launch"),
                );
            }
        }
        if self.k_max < 1 {
            return fail("k_max", "must be >= 1".into());
        }
        if self.stride == 0 || self.stride > self.k_max {
            return fail(
                "stride",
                format!("stride {} incompatible with k_max {}", self.stride, self.k_max),
            );
        }
        if self.k_max % self.stride != 0 {
            return fail(
                "stride",
                format!("stride {} must divide k_max {}", self.stride, self.k_max),
            );
        }
        if self.seq_len % 4 != 0 || self.seq_len == 0 {
            return fail("seq_len", "must be a positive multiple of 4".into());
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return fail("cond_dropout", "must lie in [0, 1]".into());
        }
        if self.guidance_omega < 0.0 {
            return fail("guidance_omega", "must be >= 0".into());
        }
        if let Some(rate) = self.mask_rate {
            let total = rate * self.n_tasks() as f64;
            if !(rate > 0.0 && rate <= 1.0) {
                return fail("mask_rate", format!("{rate} out of (0, 1]"));
            }
            if total > 1.0 + 1e-9 {
                return fail(
                    "mask_rate",
                    format!(
                        "{rate} with {} tasks would exhaust capacity before the last task",
                        self.n_tasks()
                    ),
                );
            }
        }
        if self.eval_rollouts == 0 {
            return fail("eval_rollouts", "must be >= 1".into());
        }
        if self.batch == 0 {
            return fail("batch", "must be >= 1".into());
        }
        self.vq
            .validate()
            .map_err(|e| VqcdError::config(format!("vq: {e}")))?;
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma", "must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Parse, default-fill, and validate a raw JSON config.
pub fn validate_config(raw: &str) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::from_json(raw)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_fills_documented_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg.k_max, 200);
        assert_eq!(cfg.stride, 20);
        assert_eq!(cfg.guidance_omega, 1.2);
        assert_eq!(cfg.seq_len, 8);
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.cond_dropout, 0.25);
        assert_eq!(cfg.batch, 32);
        assert_eq!(cfg.diffusion_lr, 3e-4);
        assert_eq!(cfg.target_return, 0.95);
        assert_eq!(cfg.steps_per_task, 20_000);
        assert_eq!(cfg.vq.n_codes, 512);
        assert_eq!(cfg.vq.rho, 3.0);
        assert_eq!(cfg.vq.commitment_cost, 0.25);
        assert_eq!(cfg.unet.hidden, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_json("{\"no_such_field\": 1}").unwrap_err();
        assert!(err.to_string().contains("no_such_field"), "{err}");
    }

    #[test]
    fn oversized_stride_names_both_fields() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dir.path().join("d.jsonl");
        std::fs::write(&ds, "x").unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.datasets = vec![ds.display().to_string()];
        cfg.stride = 300;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stride") && msg.contains("300") && msg.contains("200"), "{msg}");
    }

    #[test]
    fn capacity_exhausting_mask_rate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut datasets = Vec::new();
        for i in 0..4 {
            let p = dir.path().join(format!("{i}.jsonl"));
            std::fs::write(&p, "x").unwrap();
            datasets.push(p.display().to_string());
        }
        let mut cfg = PipelineConfig::default();
        cfg.datasets = datasets;
        cfg.mask_rate = Some(0.5);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("mask_rate"), "{err}");
    }

    #[test]
    fn missing_dataset_is_reported_with_path() {
        let mut cfg = PipelineConfig::default();
        cfg.datasets = vec!["definitely/not/here.jsonl".into()];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("definitely/not/here.jsonl"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.stride = 10;
        assert_ne!(a.hash(), b.hash());
    }
}
