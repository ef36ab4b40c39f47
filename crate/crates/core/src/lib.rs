//! Unified multi-task diffusion over packed audio and video latents.
//!
//! One denoiser with one parameter set serves class-to-audio-video (T2AV),
//! audio-to-video (A2V) and video-to-audio (V2A) generation. Tasks differ
//! only in which modality is noised, which one is held clean, and the task
//! token appended to the sequence. Synthetic linear-Gaussian data provides
//! closed-form oracles for every learned quantity.

pub mod denoiser;
pub mod digest;
pub mod error;
pub mod latent;
pub mod metrics;
mod nn;
pub mod sampler;
pub mod schedule;
pub mod tasks;
pub mod toy_data;
pub mod train;

pub use denoiser::{DenoiseInput, DenoiserConfig, DenoiserParameters, Gradients};
pub use error::{Error, Result};
pub use latent::{Modality, ModalityLayout, TaskId, UnifiedLatent};
pub use sampler::{NoisePredictor, SamplerConfig, SamplerMode};
pub use schedule::NoiseSchedule;
pub use tasks::{TaskSpec, TrainingExample};
pub use toy_data::{GaussianScoreOracle, GeneratorSpec};
