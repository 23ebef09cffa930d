//! Training-free age control at inference: latent guidance along the score
//! difference between age and generic prompts, and attention boosting.

pub mod sampler;
pub mod ttab;

pub use sampler::{
    aagg_gradient, aagg_update, age_gradient, ddim_step, ddim_step_clipped, identity_tokens, initial_noise, plain_ddim, restore,
    restore_batch, restore_batch_targets, sample, sampler_timesteps, AgeGradient, GuidanceConfig, RestoreReport, SamplerInputs,
    SamplerTrace, StepTrace,
};
pub use ttab::{gamma_from_scores, ttab_attention, ttab_gamma, SpatialResponse};
