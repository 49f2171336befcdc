//! Stage orchestration: codec pretraining, per-task masked diffuser
//! training with rolling evaluation, weights assembling, and the final
//! continual evaluation. Every stage is resumable from its on-disk
//! artifacts, and every artifact carries the config hash and seed.

use std::path::{Path, PathBuf};

use crate::diffusion::{
    train_task, Diffuser, GateMap, IdmTrainConfig, InverseDynamics, SamplerConfig,
    SequenceDataset, SwaTrainConfig, UnetConfig,
};
use crate::error::{Result, VqcdError};
use crate::mask::{
    assemble, generate_mask, load_mask, save_mask, CapacityLedger, TaskMask,
};
use crate::pipeline::agent::{ActionDecode, Aligner, MinMax, PadAligner, PolicyAgent};
use crate::pipeline::config::{ActionMode, Alignment, PipelineConfig};
use crate::pipeline::report::{emit_report, RunSummary};
use crate::qsa::{train_codec_with, Codec, Modality, TaskCodecs};
use crate::rng::substream;
use crate::suite::{
    discounted_return, load_dataset, normalized_score, rollout_eval, Dataset, MetricsMatrix,
};
use crate::tensor::{CheckpointMeta, ParameterStore};

// Substream labels per pipeline stage.
const L_QSA: u64 = 0x11;
const L_IDM: u64 = 0x22;
const L_INIT: u64 = 0x33;
const L_MASK: u64 = 0x44;
const L_SWA: u64 = 0x55;
const L_EVAL: u64 = 0x66;

/// On-disk layout of one run directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn codec(&self, task: usize) -> PathBuf {
        self.root.join(format!("codecs/task{task}.codec"))
    }

    pub fn idm(&self, task: usize) -> PathBuf {
        self.root.join(format!("idm/task{task}.ckpt"))
    }

    pub fn mask(&self, task: usize) -> PathBuf {
        self.root.join(format!("masks/task{task}.mask"))
    }

    pub fn checkpoint(&self, task: usize) -> PathBuf {
        self.root.join(format!("checkpoints/task{task}.ckpt"))
    }

    pub fn curve(&self, task: usize) -> PathBuf {
        self.root.join(format!("curves/task{task}_loss.csv"))
    }

    pub fn assembled(&self) -> PathBuf {
        self.root.join("assembled.ckpt")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn scores_csv(&self) -> PathBuf {
        self.root.join("normalized_scores.csv")
    }

    pub fn summary_json(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

pub struct RunArtifacts {
    pub layout: Layout,
    pub matrix: MetricsMatrix,
    pub summary: RunSummary,
}

fn load_datasets(cfg: &PipelineConfig) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for path in &cfg.datasets {
        let ds = load_dataset(Path::new(path))?;
        ds.header.task.validate()?;
        out.push(ds);
    }
    let mut ids: Vec<usize> = out.iter().map(|d| d.header.task.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != out.len() {
        return Err(VqcdError::config("task ids in datasets must be unique"));
    }
    Ok(out)
}

/// Stage 1: per-task space alignment. Trains and saves VQ codecs (or
/// derives padding aligners), resuming from existing codec files.
pub fn stage_qsa(cfg: &PipelineConfig) -> Result<Vec<Aligner>> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let layout = Layout::new(cfg.out_path());
    match cfg.alignment {
        Alignment::Padding => {
            let d_s_max = datasets.iter().map(|d| d.header.task.d_s).max().unwrap();
            let d_a_max = datasets.iter().map(|d| d.header.task.d_a).max().unwrap();
            Ok(datasets
                .iter()
                .map(|ds| {
                    Aligner::Pad(PadAligner {
                        task_id: ds.header.task.id,
                        d_s: ds.header.task.d_s,
                        d_a: ds.header.task.d_a,
                        d_s_max,
                        d_a_max,
                        state_norm: MinMax {
                            lo: ds.header.state_min.clone(),
                            hi: ds.header.state_max.clone(),
                        },
                        action_norm: MinMax {
                            lo: ds.header.action_min.clone(),
                            hi: ds.header.action_max.clone(),
                        },
                    })
                })
                .collect())
        }
        Alignment::Vq => {
            let mut aligners = Vec::new();
            for (i, ds) in datasets.iter().enumerate() {
                let path = layout.codec(i);
                if path.exists() {
                    aligners.push(Aligner::Vq(TaskCodecs::load(&path)?));
                    continue;
                }
                let task = &ds.header.task;
                let mut pair = TaskCodecs {
                    state: Codec::init(
                        task.id,
                        Modality::State,
                        task.d_s,
                        &cfg.vq,
                        ds.header.state_min.clone(),
                        ds.header.state_max.clone(),
                        &mut substream(cfg.seed, &[L_QSA, i as u64, 0]),
                    )?,
                    action: Codec::init(
                        task.id,
                        Modality::Action,
                        task.d_a,
                        &cfg.vq,
                        ds.header.action_min.clone(),
                        ds.header.action_max.clone(),
                        &mut substream(cfg.seed, &[L_QSA, i as u64, 1]),
                    )?,
                };
                let state_rows: Vec<&[f32]> = ds.state_rows().collect();
                let action_rows: Vec<&[f32]> = ds.action_rows().collect();
                train_codec_with(
                    &mut pair.state,
                    &state_rows,
                    cfg.qsa_steps,
                    &cfg.vq,
                    &mut substream(cfg.seed, &[L_QSA, i as u64, 2]),
                )?;
                train_codec_with(
                    &mut pair.action,
                    &action_rows,
                    cfg.qsa_steps,
                    &cfg.vq,
                    &mut substream(cfg.seed, &[L_QSA, i as u64, 3]),
                )?;
                pair.save(&path, cfg.seed, cfg.hash())?;
                aligners.push(Aligner::Vq(pair));
            }
            Ok(aligners)
        }
    }
}

fn stage_idm(cfg: &PipelineConfig, datasets: &[Dataset]) -> Result<Vec<InverseDynamics>> {
    let layout = Layout::new(cfg.out_path());
    let mut out = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        let path = layout.idm(i);
        if path.exists() {
            out.push(InverseDynamics::load(&path)?);
            continue;
        }
        let task = &ds.header.task;
        let mut rng = substream(cfg.seed, &[L_IDM, i as u64]);
        let mut idm =
            InverseDynamics::init(task.id, task.d_s, task.d_a, cfg.idm.hidden, &mut rng);
        let train_cfg = IdmTrainConfig {
            steps: cfg.idm.steps,
            batch: cfg.idm.batch,
            lr: cfg.idm.lr,
            hidden: cfg.idm.hidden,
            weight_decay: cfg.idm.weight_decay,
        };
        idm.train(ds, &train_cfg, &mut rng)?;
        idm.save(&path, cfg.seed)?;
        out.push(idm);
    }
    Ok(out)
}

/// Aligned training windows for one task under any aligner.
pub fn build_windows(
    dataset: &Dataset,
    aligner: &Aligner,
    seq_len: usize,
    gamma: f64,
) -> Result<SequenceDataset> {
    if let Aligner::Vq(codecs) = aligner {
        return SequenceDataset::build(dataset, codecs, seq_len, gamma);
    }
    let sw = aligner.state_width();
    let aw = aligner.action_width();
    let width = sw + aw;
    let mut windows = Vec::new();
    let mut returns = Vec::new();
    for episode in &dataset.episodes {
        let len = episode.len();
        if len < seq_len {
            continue;
        }
        let s_feats: Vec<Vec<f32>> = episode.states[..len]
            .iter()
            .map(|s| aligner.align_state(s))
            .collect::<Result<_>>()?;
        let a_feats: Vec<Vec<f32>> = episode
            .actions
            .iter()
            .map(|a| aligner.align_action(a))
            .collect::<Result<_>>()?;
        for t0 in 0..=(len - seq_len) {
            let mut w = vec![0.0f32; width * seq_len];
            for (dt, t) in (t0..t0 + seq_len).enumerate() {
                for c in 0..sw {
                    w[c * seq_len + dt] = s_feats[t][c];
                }
                for c in 0..aw {
                    w[(sw + c) * seq_len + dt] = a_feats[t][c];
                }
            }
            windows.push(w);
            returns.push(discounted_return(&episode.rewards, t0, seq_len, gamma)?);
        }
    }
    SequenceDataset::from_parts(
        dataset.header.task.id,
        width,
        sw,
        seq_len,
        windows,
        returns,
    )
}

fn unet_config(cfg: &PipelineConfig, feature_width: usize) -> UnetConfig {
    UnetConfig {
        in_channels: feature_width,
        hidden: cfg.unet.hidden,
        groups: cfg.unet.groups,
        kernel: cfg.unet.kernel,
        sin_dim: cfg.unet.sin_dim,
        emb_dim: cfg.unet.emb_dim,
        seq_len: cfg.seq_len,
    }
}

fn eval_task(
    cfg: &PipelineConfig,
    diffuser: &Diffuser,
    store: &ParameterStore,
    gates: Option<&GateMap>,
    aligner: &Aligner,
    idm: Option<&InverseDynamics>,
    dataset: &Dataset,
) -> Result<f64> {
    let task = &dataset.header.task;
    let sampler = SamplerConfig {
        stride: cfg.stride,
        omega: cfg.guidance_omega,
        clamp_denoised: true,
    };
    let mode = match cfg.mode {
        ActionMode::Joint => ActionDecode::Joint,
        ActionMode::Idm => ActionDecode::Idm,
    };
    let summary = rollout_eval(
        task,
        cfg.eval_rollouts,
        substream_u64(cfg.eval_seed, task.id as u64),
        |ep| {
            let agent = PolicyAgent {
                diffuser,
                store,
                gates,
                aligner,
                idm,
                sampler: sampler.clone(),
                target_return: cfg.target_return,
                mode,
                action_bound: task.action_bound,
                rng: substream(cfg.eval_seed, &[L_EVAL, task.id as u64, ep as u64]),
            };
            let mut agent = agent;
            Ok(move |s: &[f32]| agent.act(s))
        },
    )?;
    Ok(summary.mean)
}

fn substream_u64(seed: u64, label: u64) -> u64 {
    // Stable per-task evaluation base seed.
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(label)
}

struct SwaOutcome {
    store: ParameterStore,
    masks: Vec<TaskMask>,
    checkpoints: Vec<ParameterStore>,
    matrix: MetricsMatrix,
}

/// Stage 2: sequential masked diffuser training with evaluation of all
/// seen tasks after each task.
fn stage_swa_inner(
    cfg: &PipelineConfig,
    datasets: &[Dataset],
    aligners: &[Aligner],
    idms: &[InverseDynamics],
) -> Result<SwaOutcome> {
    let layout = Layout::new(cfg.out_path());
    let n_tasks = datasets.len();
    let width = aligners[0].feature_width();
    for a in aligners {
        if a.feature_width() != width {
            return Err(VqcdError::invariant(
                "aligned feature width differs between tasks",
            ));
        }
    }
    let diffuser = Diffuser::new(unet_config(cfg, width), cfg.k_max)?;
    let mut store = diffuser
        .unet
        .init_params(&mut substream(cfg.seed, &[L_INIT]));
    let shapes: Vec<(String, Vec<usize>)> = store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let mut ledger = CapacityLedger::new(&shapes, n_tasks, cfg.effective_mask_rate())?;

    let mut masks: Vec<TaskMask> = Vec::new();
    let mut checkpoints: Vec<ParameterStore> = Vec::new();
    let mut matrix = MetricsMatrix::new(n_tasks);

    for i in 0..n_tasks {
        // Masks are skipped entirely for the shared-weights baseline.
        if !cfg.baseline_finetune {
            let mpath = layout.mask(i);
            let mask = if mpath.exists() {
                let loaded = load_mask(&mpath)?;
                deduct_from_ledger(&mut ledger, &loaded)?;
                loaded
            } else {
                let mask = generate_mask(
                    datasets[i].header.task.id,
                    i + 1,
                    &mut ledger,
                    cfg.seed,
                    &mut substream(cfg.seed, &[L_MASK, i as u64]),
                )?;
                save_mask(&mask, &mpath)?;
                mask
            };
            masks.push(mask);
        }

        let cpath = layout.checkpoint(i);
        if cpath.exists() {
            let (loaded, _) = ParameterStore::load(&cpath)?;
            store = loaded;
        } else {
            // Training must not leapfrog a missing earlier checkpoint.
            for j in 0..i {
                if !layout.checkpoint(j).exists() {
                    return Err(VqcdError::MissingArtifact {
                        stage: "swa",
                        path: layout.checkpoint(j).display().to_string(),
                    });
                }
            }
            let windows = build_windows(&datasets[i], &aligners[i], cfg.seq_len, cfg.gamma)?;
            let gates = if cfg.baseline_finetune {
                None
            } else {
                Some(masks[i].gates())
            };
            let train_cfg = SwaTrainConfig {
                steps: cfg.steps_per_task,
                batch: cfg.batch,
                lr: cfg.diffusion_lr,
                cond_dropout: cfg.cond_dropout,
            };
            let curve = train_task(
                &diffuser,
                &mut store,
                gates.as_ref(),
                &windows,
                &train_cfg,
                &mut substream(cfg.seed, &[L_SWA, i as u64]),
            )?;
            let meta = CheckpointMeta {
                task_id: Some(datasets[i].header.task.id),
                step: (i as u64 + 1) * cfg.steps_per_task,
                seed: cfg.seed,
                config_hash: cfg.hash(),
                extra: Default::default(),
            };
            store.save(&cpath, &meta)?;
            write_curve(&layout.curve(i), &curve)?;
        }
        checkpoints.push(store.snapshot());

        // Evaluate every seen task against the current weights.
        for j in 0..=i {
            let gates_j = if cfg.baseline_finetune {
                None
            } else {
                Some(masks[j].gates())
            };
            let ret = eval_task(
                cfg,
                &diffuser,
                &store,
                gates_j.as_ref(),
                &aligners[j],
                idms.get(j),
                &datasets[j],
            )?;
            matrix.set(i, j, ret);
        }
        persist_matrix(&layout, &matrix)?;
    }
    Ok(SwaOutcome {
        store,
        masks,
        checkpoints,
        matrix,
    })
}

fn deduct_from_ledger(ledger: &mut CapacityLedger, mask: &TaskMask) -> Result<()> {
    // Re-claim a loaded mask's positions so later tasks stay disjoint.
    for (name, _, bits) in mask.entries() {
        let report = ledger.capacity_report();
        if !report.contains_key(name) {
            return Err(VqcdError::invariant(format!(
                "loaded mask references unknown tensor `{name}`"
            )));
        }
        ledger.claim(name, bits)?;
    }
    Ok(())
}

fn write_curve(path: &Path, curve: &[f32]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| VqcdError::io(dir.display().to_string(), e))?;
    }
    let mut out = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| VqcdError::io(path.display().to_string(), e))
}

fn persist_matrix(layout: &Layout, matrix: &MetricsMatrix) -> Result<()> {
    let json = serde_json::to_string_pretty(matrix)?;
    std::fs::write(layout.metrics_json(), json)
        .map_err(|e| VqcdError::io(layout.metrics_json().display().to_string(), e))
}

/// Stage 3: weights assembling, with a masked-equality audit against every
/// checkpoint.
fn stage_assemble_inner(
    cfg: &PipelineConfig,
    outcome: &SwaOutcome,
) -> Result<ParameterStore> {
    let layout = Layout::new(cfg.out_path());
    let assembled = if cfg.baseline_finetune {
        outcome.store.snapshot()
    } else {
        let ckpt_refs: Vec<&ParameterStore> = outcome.checkpoints.iter().collect();
        let mask_refs: Vec<&TaskMask> = outcome.masks.iter().collect();
        let assembled = assemble(&ckpt_refs, &mask_refs)?;
        // Audit: each task's masked view of the assembled store must be
        // bit-identical to its checkpoint's masked view.
        for (ckpt, mask) in outcome.checkpoints.iter().zip(&outcome.masks) {
            for (name, tensor) in assembled.iter() {
                let bits = mask.bits(name).ok_or_else(|| {
                    VqcdError::invariant(format!("mask misses tensor `{name}`"))
                })?;
                let original = ckpt.get(name).expect("checkpoint tensor");
                for idx in bits.iter_ones() {
                    if tensor.data()[idx].to_bits() != original.data()[idx].to_bits() {
                        return Err(VqcdError::invariant(format!(
                            "assembling broke task {} weights at `{name}`[{idx}]",
                            mask.task_id
                        )));
                    }
                }
            }
        }
        assembled
    };
    let meta = CheckpointMeta {
        task_id: None,
        step: cfg.steps_per_task * outcome.checkpoints.len() as u64,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        extra: Default::default(),
    };
    assembled.save(&layout.assembled(), &meta)?;
    Ok(assembled)
}

/// Load aligners without training: codec files must already exist for the
/// VQ alignment mode.
fn load_aligners_strict(cfg: &PipelineConfig, datasets: &[Dataset]) -> Result<Vec<Aligner>> {
    if cfg.alignment == Alignment::Vq {
        let layout = Layout::new(cfg.out_path());
        for i in 0..datasets.len() {
            if !layout.codec(i).exists() {
                return Err(VqcdError::PipelineOrder {
                    what: "swa training",
                    missing: format!("codec file {}", layout.codec(i).display()),
                });
            }
        }
    }
    stage_qsa(cfg)
}

/// Stage verb: sequential masked training only. Codecs must exist.
pub fn stage_swa(cfg: &PipelineConfig) -> Result<MetricsMatrix> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let aligners = load_aligners_strict(cfg, &datasets)?;
    let idms = if cfg.mode == ActionMode::Idm {
        stage_idm(cfg, &datasets)?
    } else {
        Vec::new()
    };
    let outcome = stage_swa_inner(cfg, &datasets, &aligners, &idms)?;
    Ok(outcome.matrix)
}

/// Stage verb: assemble saved checkpoints under saved masks.
pub fn stage_assemble(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(cfg.out_path());
    let n = cfg.n_tasks();
    let mut checkpoints = Vec::new();
    let mut masks = Vec::new();
    for i in 0..n {
        let cpath = layout.checkpoint(i);
        if !cpath.exists() {
            return Err(VqcdError::MissingArtifact {
                stage: "assemble",
                path: cpath.display().to_string(),
            });
        }
        let (store, _) = ParameterStore::load(&cpath)?;
        checkpoints.push(store);
        if !cfg.baseline_finetune {
            let mpath = layout.mask(i);
            if !mpath.exists() {
                return Err(VqcdError::MissingArtifact {
                    stage: "assemble",
                    path: mpath.display().to_string(),
                });
            }
            masks.push(load_mask(&mpath)?);
        }
    }
    let store = checkpoints
        .last()
        .expect("validated non-empty")
        .snapshot();
    let outcome = SwaOutcome {
        store,
        masks,
        checkpoints,
        matrix: MetricsMatrix::new(n),
    };
    stage_assemble_inner(cfg, &outcome)?;
    Ok(())
}

/// Full pipeline: alignment pretraining, sequential masked training,
/// assembling, final evaluation, and report emission.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let aligners = stage_qsa(cfg)?;
    let idms = if cfg.mode == ActionMode::Idm {
        stage_idm(cfg, &datasets)?
    } else {
        Vec::new()
    };
    let outcome = stage_swa_inner(cfg, &datasets, &aligners, &idms)?;
    let assembled = stage_assemble_inner(cfg, &outcome)?;

    // Final row from the assembled model.
    let layout = Layout::new(cfg.out_path());
    let diffuser = Diffuser::new(unet_config(cfg, aligners[0].feature_width()), cfg.k_max)?;
    let n = datasets.len();
    let mut matrix = outcome.matrix.clone();
    for j in 0..n {
        let gates_j = if cfg.baseline_finetune {
            None
        } else {
            Some(outcome.masks[j].gates())
        };
        let ret = eval_task(
            cfg,
            &diffuser,
            &assembled,
            gates_j.as_ref(),
            &aligners[j],
            idms.get(j),
            &datasets[j],
        )?;
        matrix.set(n - 1, j, ret);
    }
    persist_matrix(&layout, &matrix)?;
    let summary = emit_report(&matrix, cfg, &datasets)?;
    Ok(RunArtifacts {
        layout,
        matrix,
        summary,
    })
}

/// Recompute the final row and summary from saved artifacts.
pub fn evaluate_continual(cfg: &PipelineConfig, rollouts: Option<usize>) -> Result<RunArtifacts> {
    let mut cfg = cfg.clone();
    if let Some(r) = rollouts {
        cfg.eval_rollouts = r;
    }
    let layout = Layout::new(cfg.out_path());
    if !layout.assembled().exists() {
        return Err(VqcdError::MissingArtifact {
            stage: "eval",
            path: layout.assembled().display().to_string(),
        });
    }
    if !layout.metrics_json().exists() {
        return Err(VqcdError::MissingArtifact {
            stage: "eval",
            path: layout.metrics_json().display().to_string(),
        });
    }
    let datasets = load_datasets(&cfg)?;
    let aligners = stage_qsa(&cfg)?;
    let idms = if cfg.mode == ActionMode::Idm {
        stage_idm(&cfg, &datasets)?
    } else {
        Vec::new()
    };
    let (assembled, _) = ParameterStore::load(&layout.assembled())?;
    let raw = std::fs::read_to_string(layout.metrics_json())
        .map_err(|e| VqcdError::io(layout.metrics_json().display().to_string(), e))?;
    let mut matrix: MetricsMatrix = serde_json::from_str(&raw)?;
    let n = datasets.len();
    let diffuser = Diffuser::new(unet_config(&cfg, aligners[0].feature_width()), cfg.k_max)?;
    for j in 0..n {
        let gates_j = if cfg.baseline_finetune {
            None
        } else {
            let mpath = layout.mask(j);
            if !mpath.exists() {
                return Err(VqcdError::MissingArtifact {
                    stage: "eval",
                    path: mpath.display().to_string(),
                });
            }
            Some(load_mask(&mpath)?.gates())
        };
        let ret = eval_task(
            &cfg,
            &diffuser,
            &assembled,
            gates_j.as_ref(),
            &aligners[j],
            idms.get(j),
            &datasets[j],
        )?;
        matrix.set(n - 1, j, ret);
    }
    persist_matrix(&layout, &matrix)?;
    let summary = emit_report(&matrix, &cfg, &datasets)?;
    Ok(RunArtifacts {
        layout,
        matrix,
        summary,
    })
}

/// Outcome of a pruning experiment at one threshold.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PruneOutcome {
    pub threshold: f32,
    pub prune_rate: f64,
    pub released: usize,
    /// Mean normalized score across tasks before pruning.
    pub score_before: f64,
    /// Mean normalized score across tasks after pruning.
    pub score_after: f64,
}

/// Release low-magnitude mask positions on the assembled model and measure
/// retention. Pruned masks are written beside the originals; the originals
/// stay untouched.
pub fn prune_and_eval(cfg: &PipelineConfig, threshold: f32) -> Result<PruneOutcome> {
    if cfg.baseline_finetune {
        return Err(VqcdError::config("pruning requires the masked pipeline"));
    }
    let layout = Layout::new(cfg.out_path());
    if !layout.assembled().exists() {
        return Err(VqcdError::MissingArtifact {
            stage: "prune",
            path: layout.assembled().display().to_string(),
        });
    }
    let datasets = load_datasets(cfg)?;
    let aligners = stage_qsa(cfg)?;
    let idms = if cfg.mode == ActionMode::Idm {
        stage_idm(cfg, &datasets)?
    } else {
        Vec::new()
    };
    let (assembled, _) = ParameterStore::load(&layout.assembled())?;
    let n = datasets.len();
    let mut masks = Vec::new();
    for j in 0..n {
        let p = layout.mask(j);
        if !p.exists() {
            return Err(VqcdError::MissingArtifact {
                stage: "prune",
                path: p.display().to_string(),
            });
        }
        masks.push(load_mask(&p)?);
    }
    let shapes: Vec<(String, Vec<usize>)> = assembled
        .iter()
        .map(|(nm, t)| (nm.to_string(), t.shape().to_vec()))
        .collect();
    let mut ledger = CapacityLedger::new(&shapes, n, cfg.effective_mask_rate())?;
    for m in &masks {
        deduct_from_ledger(&mut ledger, m)?;
    }

    let diffuser = Diffuser::new(unet_config(cfg, aligners[0].feature_width()), cfg.k_max)?;
    let eval_all = |masks: &[TaskMask]| -> Result<f64> {
        let mut acc = 0.0;
        for j in 0..n {
            let gates = masks[j].gates();
            let ret = eval_task(
                cfg,
                &diffuser,
                &assembled,
                Some(&gates),
                &aligners[j],
                idms.get(j),
                &datasets[j],
            )?;
            acc += normalized_score(
                ret,
                datasets[j].header.r_random,
                datasets[j].header.r_expert,
            )?;
        }
        Ok(acc / n as f64)
    };

    let score_before = eval_all(&masks)?;
    let report = crate::mask::prune_masks(&assembled, &mut masks, &mut ledger, threshold)?;
    for (j, m) in masks.iter().enumerate() {
        save_mask(m, &layout.root.join(format!("masks_pruned/task{j}.mask")))?;
    }
    let score_after = eval_all(&masks)?;
    let outcome = PruneOutcome {
        threshold,
        prune_rate: report.prune_rate,
        released: report.released,
        score_before,
        score_after,
    };
    let json = serde_json::to_string_pretty(&outcome)?;
    std::fs::write(layout.root.join("prune.json"), json)
        .map_err(|e| VqcdError::io("prune.json".to_string(), e))?;
    Ok(outcome)
}

/// Normalized score over the final row for a quick retention comparison.
pub fn mean_normalized_final(matrix: &MetricsMatrix, datasets: &[Dataset]) -> Result<f64> {
    let n = matrix.n_tasks();
    let mut acc = 0.0;
    for j in 0..n {
        let r = matrix.get(n - 1, j).ok_or_else(|| {
            VqcdError::invariant(format!("final row missing entry for task {j}"))
        })?;
        acc += normalized_score(
            r,
            datasets[j].header.r_random,
            datasets[j].header.r_expert,
        )?;
    }
    Ok(acc / n as f64)
}
