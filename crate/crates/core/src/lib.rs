//! Conditional denoising-diffusion toolkit for low-dose emission-image
//! denoising.
//!
//! The crate provides the forward/reverse diffusion math, a small
//! encoder-decoder eps-prediction network with hand-written backprop, the
//! training loop, the four conditional denoising variants (including
//! measurement-guided sampling), classical baselines (guided non-local means
//! and a supervised U-net), synthetic paired phantoms with Poisson low-dose
//! simulation, and a quantitative evaluation harness.

pub mod baselines;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod plots;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod train;

pub use diffusion::{
    analytic_eps_gaussian, ancestral_step, forward_sample, guided_step, posterior_params,
    predict_x0_from_eps, GuidanceSign, LatentState,
};
pub use error::{Error, Result};
pub use image::{ImageVolume, IntensityUnit};
pub use schedule::{Schedule, ScheduleKind, SigmaKind};
