//! C ABI over the pipeline: opaque handles, integer status codes, and
//! caller-freed strings. The matching header lives at `include/vqcd.h`
//! and is maintained by hand; keep the two in sync.
//!
//! Conventions:
//! - functions return `VQCD_OK` (0) or a nonzero status; the message for
//!   the most recent failure on the current thread comes from
//!   [`vqcd_last_error_message`]
//! - strings returned as `*mut c_char` are owned by the caller and must be
//!   released with [`vqcd_string_free`]
//! - handles are created and released by exactly one matching free call

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use libc::{c_char, c_int};

use vqcd_core::diffusion::{ddim_sample, Diffuser, GateMap, Inpaint, InverseDynamics, SamplerConfig, UnetConfig};
use vqcd_core::mask::load_mask;
use vqcd_core::pipeline::{
    evaluate_continual, run_pipeline, ActionMode, Aligner, Alignment, Layout, MinMax,
    PadAligner, PipelineConfig,
};
use vqcd_core::qsa::TaskCodecs;
use vqcd_core::rng::{substream, Prng};
use vqcd_core::suite::{generate_dataset, load_dataset, save_dataset, Quality, TaskSpec};
use vqcd_core::tensor::ParameterStore;
use vqcd_core::VqcdError;

pub const VQCD_OK: c_int = 0;
pub const VQCD_ERR_NULL_ARGUMENT: c_int = 1;
pub const VQCD_ERR_INVALID_UTF8: c_int = 2;
pub const VQCD_ERR_CONFIG: c_int = 3;
pub const VQCD_ERR_IO: c_int = 4;
pub const VQCD_ERR_RUNTIME: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &VqcdError) -> c_int {
    match err {
        VqcdError::Config(_) => VQCD_ERR_CONFIG,
        VqcdError::Io { .. } | VqcdError::Format { .. } | VqcdError::MissingArtifact { .. } => {
            VQCD_ERR_IO
        }
        _ => VQCD_ERR_RUNTIME,
    }
}

fn fail(err: VqcdError) -> c_int {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn required_str<'a>(ptr: *const c_char) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(VQCD_ERR_NULL_ARGUMENT);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        VQCD_ERR_INVALID_UTF8
    })
}

fn to_owned_cstring(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .unwrap_or_default()
        .into_raw()
}

/// Most recent error message on this thread, or null. Free the result with
/// [`vqcd_string_free`].
#[no_mangle]
pub extern "C" fn vqcd_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string allocated by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vqcd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Static version string; do not free.
#[no_mangle]
pub extern "C" fn vqcd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Default pipeline configuration as JSON. Caller frees.
#[no_mangle]
pub extern "C" fn vqcd_default_config_json() -> *mut c_char {
    to_owned_cstring(PipelineConfig::default().to_json())
}

/// Generate an offline dataset.
///
/// `task_json` is a TaskSpec object, `mix` is `quality:fraction` pairs
/// separated by commas (e.g. `expert:0.5,random:0.5`).
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn vqcd_gen_data(
    task_json: *const c_char,
    mix: *const c_char,
    episodes: u64,
    seed: u64,
    out_path: *const c_char,
) -> c_int {
    let task_json = match required_str(task_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mix_str = match required_str(mix) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let out = match required_str(out_path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let spec: TaskSpec = match serde_json::from_str(task_json) {
        Ok(s) => s,
        Err(e) => {
            set_error(&format!("task spec: {e}"));
            return VQCD_ERR_CONFIG;
        }
    };
    let mut mix_entries: Vec<(Quality, f64)> = Vec::new();
    for part in mix_str.split(',') {
        let Some((name, frac)) = part.split_once(':') else {
            set_error(&format!("mix entry `{part}` must be quality:fraction"));
            return VQCD_ERR_CONFIG;
        };
        let quality: Quality = match name.trim().parse() {
            Ok(q) => q,
            Err(e) => return fail(e),
        };
        let frac: f64 = match frac.trim().parse() {
            Ok(f) => f,
            Err(_) => {
                set_error(&format!("bad fraction in `{part}`"));
                return VQCD_ERR_CONFIG;
            }
        };
        mix_entries.push((quality, frac));
    }
    match generate_dataset(&spec, &mix_entries, episodes as usize, seed)
        .and_then(|ds| save_dataset(&ds, Path::new(out)))
    {
        Ok(()) => VQCD_OK,
        Err(e) => fail(e),
    }
}

/// Run the full pipeline described by a config JSON document.
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vqcd_run_pipeline(config_json: *const c_char) -> c_int {
    let raw = match required_str(config_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let cfg = match PipelineConfig::from_json(raw) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match run_pipeline(&cfg) {
        Ok(_) => VQCD_OK,
        Err(e) => fail(e),
    }
}

/// Re-evaluate saved artifacts; returns the summary JSON (caller frees) or
/// null on failure.
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vqcd_evaluate_json(
    config_json: *const c_char,
    rollouts: u64,
) -> *mut c_char {
    let raw = match required_str(config_json) {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    let cfg = match PipelineConfig::from_json(raw) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    let rollouts = if rollouts == 0 {
        None
    } else {
        Some(rollouts as usize)
    };
    match evaluate_continual(&cfg, rollouts) {
        Ok(artifacts) => match serde_json::to_string_pretty(&artifacts.summary) {
            Ok(json) => to_owned_cstring(json),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        },
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Closed-loop policy over a finished run's artifacts.
pub struct VqcdAgent {
    diffuser: Diffuser,
    store: ParameterStore,
    gates: Option<GateMap>,
    aligner: Aligner,
    idm: Option<InverseDynamics>,
    sampler: SamplerConfig,
    target_return: f32,
    mode: ActionMode,
    action_bound: f32,
    seq_len: usize,
    rng: Prng,
}

impl VqcdAgent {
    fn load(cfg: &PipelineConfig, task_index: usize, seed: u64) -> Result<Self, VqcdError> {
        if task_index >= cfg.n_tasks() {
            return Err(VqcdError::UnknownTask(task_index));
        }
        let layout = Layout::new(cfg.out_path());
        let dataset = load_dataset(Path::new(&cfg.datasets[task_index]))?;
        let task = dataset.header.task.clone();
        let aligner = match cfg.alignment {
            Alignment::Vq => {
                let path = layout.codec(task_index);
                if !path.exists() {
                    return Err(VqcdError::MissingArtifact {
                        stage: "agent",
                        path: path.display().to_string(),
                    });
                }
                Aligner::Vq(TaskCodecs::load(&path)?)
            }
            Alignment::Padding => {
                // Padded widths cover every task in the config.
                let mut d_s_max = 0;
                let mut d_a_max = 0;
                for p in &cfg.datasets {
                    let h = load_dataset(Path::new(p))?.header;
                    d_s_max = d_s_max.max(h.task.d_s);
                    d_a_max = d_a_max.max(h.task.d_a);
                }
                Aligner::Pad(PadAligner {
                    task_id: task.id,
                    d_s: task.d_s,
                    d_a: task.d_a,
                    d_s_max,
                    d_a_max,
                    state_norm: MinMax {
                        lo: dataset.header.state_min.clone(),
                        hi: dataset.header.state_max.clone(),
                    },
                    action_norm: MinMax {
                        lo: dataset.header.action_min.clone(),
                        hi: dataset.header.action_max.clone(),
                    },
                })
            }
        };
        let assembled_path = layout.assembled();
        if !assembled_path.exists() {
            return Err(VqcdError::MissingArtifact {
                stage: "agent",
                path: assembled_path.display().to_string(),
            });
        }
        let (store, _) = ParameterStore::load(&assembled_path)?;
        let gates = if cfg.baseline_finetune {
            None
        } else {
            Some(load_mask(&layout.mask(task_index))?.gates())
        };
        let idm = if cfg.mode == ActionMode::Idm {
            Some(InverseDynamics::load(&layout.idm(task_index))?)
        } else {
            None
        };
        let unet_cfg = UnetConfig {
            in_channels: aligner.feature_width(),
            hidden: cfg.unet.hidden,
            groups: cfg.unet.groups,
            kernel: cfg.unet.kernel,
            sin_dim: cfg.unet.sin_dim,
            emb_dim: cfg.unet.emb_dim,
            seq_len: cfg.seq_len,
        };
        Ok(Self {
            diffuser: Diffuser::new(unet_cfg, cfg.k_max)?,
            store,
            gates,
            aligner,
            idm,
            sampler: SamplerConfig {
                stride: cfg.stride,
                omega: cfg.guidance_omega,
                clamp_denoised: true,
            },
            target_return: cfg.target_return,
            mode: cfg.mode,
            action_bound: task.action_bound,
            seq_len: cfg.seq_len,
            rng: substream(seed, &[0xA6E7]),
        })
    }

    fn act(&mut self, state: &[f32]) -> Result<Vec<f32>, VqcdError> {
        let s_feat = self.aligner.align_state(state)?;
        let (tau, _) = ddim_sample(
            &self.diffuser,
            &self.store,
            self.gates.as_ref(),
            Some(self.target_return),
            &self.sampler,
            Some(Inpaint {
                state_feature: &s_feat,
            }),
            &mut self.rng,
        )?;
        let (sw, aw) = (self.aligner.state_width(), self.aligner.action_width());
        let action = match self.mode {
            ActionMode::Joint => {
                let feat: Vec<f32> = (0..aw).map(|c| tau[(sw + c) * self.seq_len]).collect();
                self.aligner.decode_action(&feat)?
            }
            ActionMode::Idm => {
                let idm = self.idm.as_ref().ok_or(VqcdError::PipelineOrder {
                    what: "idm action decoding",
                    missing: "trained inverse dynamics model".into(),
                })?;
                let feat: Vec<f32> = (0..sw).map(|c| tau[c * self.seq_len + 1]).collect();
                let next = self.aligner.decode_state(&feat)?;
                idm.predict(state, &next)?
            }
        };
        Ok(action
            .iter()
            .map(|&v| v.clamp(-self.action_bound, self.action_bound))
            .collect())
    }
}

/// Load an agent for one task of a finished run. Returns null on failure.
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vqcd_agent_load(
    config_json: *const c_char,
    task_index: usize,
    seed: u64,
) -> *mut VqcdAgent {
    let raw = match required_str(config_json) {
        Ok(s) => s,
        Err(_) => return std::ptr::null_mut(),
    };
    let cfg = match PipelineConfig::from_json(raw) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return std::ptr::null_mut();
        }
    };
    match VqcdAgent::load(&cfg, task_index, seed) {
        Ok(agent) => Box::into_raw(Box::new(agent)),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// One closed-loop action. `action_out` must hold at least `action_cap`
/// floats; the true action length lands in `action_len`.
///
/// # Safety
/// `agent` must be a live pointer from [`vqcd_agent_load`]; `state` must
/// point to `state_len` readable floats; `action_out` must point to
/// `action_cap` writable floats; `action_len` must be writable if non-null.
#[no_mangle]
pub unsafe extern "C" fn vqcd_agent_act(
    agent: *mut VqcdAgent,
    state: *const f32,
    state_len: usize,
    action_out: *mut f32,
    action_cap: usize,
    action_len: *mut usize,
) -> c_int {
    if agent.is_null() || state.is_null() || action_out.is_null() {
        set_error("null pointer argument");
        return VQCD_ERR_NULL_ARGUMENT;
    }
    let agent = &mut *agent;
    let state = std::slice::from_raw_parts(state, state_len);
    match agent.act(state) {
        Ok(action) => {
            if !action_len.is_null() {
                *action_len = action.len();
            }
            if action.len() > action_cap {
                set_error(&format!(
                    "action buffer too small: need {}, have {action_cap}",
                    action.len()
                ));
                return VQCD_ERR_CONFIG;
            }
            std::ptr::copy_nonoverlapping(action.as_ptr(), action_out, action.len());
            VQCD_OK
        }
        Err(e) => fail(e),
    }
}

/// Release an agent handle.
///
/// # Safety
/// `agent` must be null or a pointer from [`vqcd_agent_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vqcd_agent_free(agent: *mut VqcdAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}
