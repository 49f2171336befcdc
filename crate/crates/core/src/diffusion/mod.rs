//! Conditional diffusion over aligned feature sequences with per-task
//! masked parameters, classifier-free guidance, DDPM/DDIM sampling, and an
//! inverse-dynamics action decoder.

mod idm;
mod model;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use idm::{IdmTrainConfig, InverseDynamics};
pub use model::Diffuser;
pub use sampler::{ddim_sample, ddpm_sample, Inpaint, SampleStats, SamplerConfig};
pub use schedule::{guided_noise, NoiseSchedule};
pub use train::{train_task, SequenceDataset, SwaTrainConfig};
pub use unet::{GateMap, TemporalUnet, UnetConfig};
