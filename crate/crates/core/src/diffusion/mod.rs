//! Conditional diffusion for reconstruction: noise schedule, forward
//! process, clean-image objective, the denoising U-Net and its samplers.

mod denoiser;
mod rm;
mod sample;
mod schedule;
mod train;

pub use denoiser::{rm_predict, Denoiser, NoisePredictingRm, OracleDenoiser, PredictionTarget, RmModel, TrainedRm};
pub use rm::{rm_input, timestep_embedding, RmArch, RmCache, RmNet, RM_IN_CHANNELS};
pub use sample::{
    markov_step, sample, sample_ddim, sample_markov, sample_non_markov, tau_schedule, SamplerConfig, SamplerKind,
};
pub use schedule::{
    forward_noise, forward_noise_batch, gaussian, loss_rm, make_schedule, x0_from_eps, NoiseSchedule,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
};
pub use train::{evaluate_rm_loss, rm_batch, train_rm, RmTrainConfig, RmTrainReport};
