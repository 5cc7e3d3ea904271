//! Latent diffusion: noise schedules, the forward noising process, an
//! ε-prediction denoiser, a noisy-latent guidance classifier, and
//! classifier-guided ancestral sampling.

pub mod classifier;
pub mod denoiser;
pub mod sampling;
pub mod schedule;

pub use classifier::{
    grad_logprob, train_guidance_classifier, ClassifierConfig, ClassifierReport,
    GuidanceClassifier, LatentClassifier,
};
pub use denoiser::{train_denoiser, Denoiser, DenoiserConfig, DenoiserReport, NoisePredictor};
pub use sampling::{
    guided_reverse_step, posterior_mean, reverse_step, sample, GeneratedSample, IdentityDecoder,
    LatentDecoder, NoiseStream, SampleRequest,
};
pub use schedule::{build_schedule, forward_diffuse, forward_step, NoiseSchedule, ScheduleKind};

#[cfg(test)]
mod tests;
