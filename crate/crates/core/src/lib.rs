//! Localized preference-pair construction and region-aware DPO for latent
//! video diffusion, scaled down so every step is checkable on a desk.
//!
//! The pipeline has three stages:
//!
//! 1. [`mask`] draws closed Bézier contours, broadcasts them over frames with
//!    random rigid motion, rasterizes them and max-pools the result down to
//!    latent resolution.
//! 2. [`corruption`] renoises a clean latent to a random strength and denoises
//!    it back with a frozen model, fusing the forward-noised original back in
//!    outside the mask after every step. The clean latent and its corrupted
//!    copy form a [`corruption::PreferenceTuple`].
//! 3. [`losses`] and [`training`] optimize a denoiser with the hybrid
//!    objective (region-aware DPO + full-latent DPO + SFT) using AdamW.
//!
//! [`models`] provides the two denoisers that make this verifiable without a
//! pretrained video model: a Bayes-optimal denoiser for Gaussian data and a
//! small tanh network with hand-written backprop.

pub mod corruption;
pub mod dataset;
pub mod diffusion;
pub mod io;
pub mod latent;
pub mod losses;
pub mod mask;
pub mod models;
pub mod rng;
pub mod training;
pub mod verify;

pub use corruption::{CorruptionParams, PreferenceTuple};
pub use diffusion::{Denoiser, DiffusionSchedule, ScheduleKind};
pub use latent::{Conditioning, LatentVideo};
pub use losses::LossWeights;
pub use mask::{MaskResolution, SpatioTemporalMask};
