//! Continual offline RL at desk scale: vector-quantized space alignment,
//! selective-weight-activation diffusion, and weights assembling, together
//! with a synthetic heterogeneous task suite and an end-to-end pipeline
//! runner.
//!
//! Module map:
//! - [`tensor`]: dense-array autodiff substrate, parameter store, Adam
//! - [`mask`]: per-task binary parameter masks, capacity ledger, assembling
//! - [`suite`]: linear-Gaussian task family, scripted policies, datasets,
//!   evaluation metrics
//! - [`qsa`]: per-task vector-quantized codecs aligning heterogeneous
//!   state/action spaces
//! - [`diffusion`]: conditional temporal U-net diffuser with per-task
//!   weight masks, DDPM/DDIM sampling, inverse dynamics
//! - [`pipeline`]: configuration, stage orchestration, reports

pub mod diffusion;
pub mod error;
pub mod mask;
pub mod pipeline;
pub mod qsa;
pub mod rng;
pub mod suite;
pub mod tensor;

pub use error::{Result, VqcdError};
