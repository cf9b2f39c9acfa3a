//! Diffusion mathematics: variance schedules, the closed-form forward
//! process, reverse steps, samplers and the noise-prediction loss.
//!
//! Timesteps are 1-based: `t` ranges over `[1, T]` and `alpha_bar(0)` is
//! defined as 1. Every operation is pure given its inputs; randomness is
//! passed in as an explicit generator.

mod loss;
mod process;
mod sampler;
mod schedule;
mod tensor;

pub use loss::{loss_sgldm, loss_sgldm_grad};
pub use process::{chain_forward, ddim_step, ddpm_step, forward_sample, posterior_mean};
pub(crate) use sampler::reverse_step;
pub use sampler::{sample_loop, sampling_timesteps, NoisePredictor, Sampler};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use tensor::LatentTensor;
