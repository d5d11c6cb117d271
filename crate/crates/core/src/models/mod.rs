//! Reference denoisers.
//!
//! [`LinearGaussianDenoiser`] is the Bayes-optimal predictor when clean
//! latents are `N(μ, v·I)`; it stands in for the frozen base model during
//! corruption and serves as an oracle. [`TinyDenoiser`] is a two-layer tanh
//! network with exact hand-written gradients, used as the trainable policy.

mod analytic;
mod tiny;

pub use analytic::LinearGaussianDenoiser;
pub use tiny::{Activation, TinyConfig, TinyDenoiser};

/// Models exposing a flat parameter vector.
pub trait Parametric {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}
