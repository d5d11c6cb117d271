//! Local corruption of clean latents.
//!
//! A clean latent `z₀` is renoised to step `k = ⌈T·α⌉` and denoised back to
//! `t = 0` by a frozen model. After every sampler step the result is fused
//! with the forward-noised original at the new step:
//!
//! ```text
//! z_{t'} = M ⊙ ẑ_{t'} + (1 − M) ⊙ (a_{t'}·z₀ + b_{t'}·ε)
//! ```
//!
//! using the same `ε` that produced `z_k`, so the unmasked region follows the
//! exact forward trajectory of `z₀` and ends bit-identical to it at `t = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    add_noise, guided_predict, noise_level_to_step, sampler_step, sub_trajectory, Denoiser, DiffusionError,
    DiffusionSchedule,
};
use crate::latent::{Conditioning, LatentError, LatentVideo};
use crate::mask::{generate_mask_3d, MaskConfig, MaskError, MaskResolution, SpatioTemporalMask};
use crate::rng::uniform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorruptionError {
    #[error("invalid corruption parameters: {0}")]
    InvalidParams(String),
    #[error("mask dims {mask:?} ({resolution:?}) do not match latent dims {latent:?}")]
    MaskMismatch {
        mask: [usize; 3],
        latent: [usize; 3],
        resolution: MaskResolution,
    },
    #[error("model produced a non-finite prediction at t={t} (flat index {index})")]
    NonFinitePrediction { t: usize, index: usize },
    #[error("tuple invariant violated: {0}")]
    InvalidTuple(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionParams {
    pub noise_low: f64,
    pub noise_high: f64,
    pub sampler_steps: usize,
    pub guidance_scale: f64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self {
            noise_low: 0.75,
            noise_high: 0.95,
            sampler_steps: 50,
            guidance_scale: 6.0,
        }
    }
}

impl CorruptionParams {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        if !(0.0 < self.noise_low && self.noise_low < self.noise_high && self.noise_high < 1.0) {
            return Err(CorruptionError::InvalidParams(format!(
                "need 0 < noise_low < noise_high < 1, got ({}, {})",
                self.noise_low, self.noise_high
            )));
        }
        if self.sampler_steps == 0 {
            return Err(CorruptionError::InvalidParams("sampler_steps must be >= 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(CorruptionError::InvalidParams(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// One training record: a clean winner, its locally corrupted loser, the
/// latent-resolution mask that separates them and the corruption strength.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTuple {
    pub conditioning: Conditioning,
    pub winner: LatentVideo,
    pub loser: LatentVideo,
    pub mask: SpatioTemporalMask,
    pub noise_strength: f64,
    /// `(α_l, α_h)` the strength was drawn from.
    pub noise_range: (f64, f64),
    pub seed: u64,
}

impl PreferenceTuple {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        let bad = |m: String| Err(CorruptionError::InvalidTuple(m));
        if self.winner.shape() != self.loser.shape() {
            return bad(format!(
                "winner shape {:?} != loser shape {:?}",
                self.winner.shape(),
                self.loser.shape()
            ));
        }
        check_mask(&self.mask, &self.winner)?;
        if self.mask.is_all_zero() {
            return bad("mask is empty".into());
        }
        if let Some(i) = self.winner.first_non_finite().or(self.loser.first_non_finite()) {
            return bad(format!("non-finite latent value at index {i}"));
        }
        if !self.conditioning.is_finite() {
            return bad("non-finite conditioning".into());
        }
        let (lo, hi) = self.noise_range;
        if !(self.noise_strength >= lo && self.noise_strength <= hi) {
            return bad(format!("noise strength {} outside [{lo}, {hi}]", self.noise_strength));
        }
        if let Some(i) = first_outside_mask_difference(&self.winner, &self.loser, &self.mask) {
            return bad(format!("winner and loser differ outside the mask at index {i}"));
        }
        Ok(())
    }
}

/// First flat index outside `mask` where `a` and `b` are not bit-identical.
pub fn first_outside_mask_difference(a: &LatentVideo, b: &LatentVideo, mask: &SpatioTemporalMask) -> Option<usize> {
    let ch = a.channels();
    a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .find(|&(i, (x, y))| mask.data()[i / ch] == 0 && x.to_bits() != y.to_bits())
        .map(|(i, _)| i)
}

fn check_mask(mask: &SpatioTemporalMask, z: &LatentVideo) -> Result<(), CorruptionError> {
    let latent = [z.frames(), z.height(), z.width()];
    if mask.dims() != latent || mask.resolution() != MaskResolution::Latent {
        return Err(CorruptionError::MaskMismatch {
            mask: mask.dims(),
            latent,
            resolution: mask.resolution(),
        });
    }
    Ok(())
}

/// `M ⊙ inside + (1 − M) ⊙ outside`, with the mask broadcast over channels.
/// Implemented as a per-element select so both sides pass through unchanged.
pub fn fuse(inside: &LatentVideo, outside: &LatentVideo, mask: &SpatioTemporalMask) -> LatentVideo {
    let ch = inside.channels();
    let data = inside
        .data()
        .iter()
        .zip(outside.data())
        .enumerate()
        .map(|(i, (&a, &b))| if mask.data()[i / ch] == 1 { a } else { b })
        .collect();
    LatentVideo::from_raw(inside.shape(), data)
}

/// State after one fused sampler step, for instrumentation.
pub struct FusionStep<'a> {
    pub t: usize,
    pub t_next: usize,
    pub denoised: &'a LatentVideo,
    pub fused: &'a LatentVideo,
    pub eps: &'a LatentVideo,
}

/// Draw `α ~ U(α_l, α_h)` and corrupt `z0` inside `mask`.
/// Draw order: `α`, then the noise `ε`.
#[allow(clippy::too_many_arguments)]
pub fn corrupt_local<M: Denoiser + ?Sized>(
    z0: &LatentVideo,
    mask: &SpatioTemporalMask,
    c: &Conditioning,
    model: &M,
    schedule: &DiffusionSchedule,
    params: &CorruptionParams,
    rng: &mut impl Rng,
) -> Result<(LatentVideo, f64), CorruptionError> {
    params.validate()?;
    let alpha = uniform(rng, params.noise_low, params.noise_high);
    let z = corrupt_local_at(z0, mask, c, model, schedule, params, alpha, rng, |_| {})?;
    Ok((z, alpha))
}

/// Corrupt at a fixed strength `alpha`, reporting every fused step to
/// `observe`.
#[allow(clippy::too_many_arguments)]
pub fn corrupt_local_at<M: Denoiser + ?Sized>(
    z0: &LatentVideo,
    mask: &SpatioTemporalMask,
    c: &Conditioning,
    model: &M,
    schedule: &DiffusionSchedule,
    params: &CorruptionParams,
    alpha: f64,
    rng: &mut impl Rng,
    mut observe: impl FnMut(&FusionStep<'_>),
) -> Result<LatentVideo, CorruptionError> {
    check_mask(mask, z0)?;
    if params.sampler_steps == 0 {
        return Err(CorruptionError::InvalidParams("sampler_steps must be >= 1".into()));
    }
    let k = noise_level_to_step(alpha, schedule.total_steps())?;
    let eps = LatentVideo::standard_normal(z0.shape(), rng);
    let null = Conditioning::null(model.conditioning_dim());

    let mut z = add_noise(z0, &eps, k, schedule)?;
    let steps = sub_trajectory(k, params.sampler_steps);
    for pair in steps.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let pred = guided_predict(model, &null, &z, t, c, params.guidance_scale);
        if let Some(index) = pred.first_non_finite() {
            return Err(CorruptionError::NonFinitePrediction { t, index });
        }
        let denoised = sampler_step(&z, &pred, t, t_next, schedule)?;
        let original = add_noise(z0, &eps, t_next, schedule)?;
        let fused = fuse(&denoised, &original, mask);
        observe(&FusionStep {
            t,
            t_next,
            denoised: &denoised,
            fused: &fused,
            eps: &eps,
        });
        z = fused;
    }
    Ok(z)
}

/// How the latent-resolution mask of a pair is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMaskConfig {
    /// Pixel-space mask draw.
    pub pixel: MaskConfig,
    pub t_factor: usize,
    pub s_factor: usize,
    pub pad: bool,
}

impl PairMaskConfig {
    /// Pixel grid that max-pools exactly onto `latent_shape`.
    pub fn for_latent(latent_shape: [usize; 4], t_factor: usize, s_factor: usize, shapes: usize) -> Self {
        Self {
            pixel: MaskConfig::new(
                latent_shape[0] * t_factor,
                latent_shape[1] * s_factor,
                latent_shape[2] * s_factor,
                shapes,
            ),
            t_factor,
            s_factor,
            pad: false,
        }
    }

    pub fn latent_mask(&self, rng: &mut impl Rng) -> Result<SpatioTemporalMask, MaskError> {
        generate_mask_3d(&self.pixel, rng)?.downsample(self.t_factor, self.s_factor, self.pad)
    }
}

/// Build one preference tuple from a clean latent. Draw order: mask, then
/// the corruption (`α`, `ε`). Both latents are rounded to `f32` so the tuple
/// serializes losslessly.
#[allow(clippy::too_many_arguments)]
pub fn build_pair<M: Denoiser + ?Sized>(
    c: Conditioning,
    z_pos: &LatentVideo,
    model: &M,
    schedule: &DiffusionSchedule,
    mask_config: &PairMaskConfig,
    params: &CorruptionParams,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<PreferenceTuple, CorruptionError> {
    if let Some(i) = z_pos.first_non_finite() {
        return Err(LatentError::NonFinite(i).into());
    }
    let winner = z_pos.quantize_f32();
    let mask = mask_config.latent_mask(rng)?;
    let (loser, alpha) = corrupt_local(&winner, &mask, &c, model, schedule, params, rng)?;
    let tuple = PreferenceTuple {
        conditioning: c,
        winner,
        loser: loser.quantize_f32(),
        mask,
        noise_strength: alpha,
        noise_range: (params.noise_low, params.noise_high),
        seed,
    };
    tuple.validate()?;
    Ok(tuple)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ScheduleKind, ScheduleOptions};
    use crate::mask::MotionParams;
    use crate::models::LinearGaussianDenoiser;
    use crate::rng::seeded;

    const SHAPE: [usize; 4] = [2, 4, 4, 2];

    fn setup(kind: ScheduleKind) -> (DiffusionSchedule, LinearGaussianDenoiser) {
        let s = DiffusionSchedule::new(kind, 1000, &ScheduleOptions::default()).unwrap();
        let m = LinearGaussianDenoiser::new(LatentVideo::filled(SHAPE, 0.2), 1.0, s.clone(), 3);
        (s, m)
    }

    fn half_mask() -> SpatioTemporalMask {
        let mut m = SpatioTemporalMask::zeros([2, 4, 4], MaskResolution::Latent);
        for f in 0..2 {
            for r in 0..2 {
                for c in 0..4 {
                    m.set(f, r, c, true);
                }
            }
        }
        m
    }

    #[test]
    fn empty_mask_returns_input() {
        for kind in [ScheduleKind::Ddpm, ScheduleKind::RectifiedFlow] {
            let (s, m) = setup(kind);
            let z0 = LatentVideo::standard_normal(SHAPE, &mut seeded(1));
            let mask = SpatioTemporalMask::zeros([2, 4, 4], MaskResolution::Latent);
            let c = Conditioning::null(3);
            let (out, _) = corrupt_local(&z0, &mask, &c, &m, &s, &CorruptionParams::default(), &mut seeded(2)).unwrap();
            assert_eq!(out, z0);
        }
    }

    #[test]
    fn full_mask_is_plain_redraw() {
        for kind in [ScheduleKind::Ddpm, ScheduleKind::RectifiedFlow] {
            let (s, m) = setup(kind);
            let z0 = LatentVideo::standard_normal(SHAPE, &mut seeded(1));
            let mask = SpatioTemporalMask::ones([2, 4, 4], MaskResolution::Latent);
            let c = Conditioning::null(3);
            let params = CorruptionParams::default();
            let alpha = 0.8;
            let out = corrupt_local_at(&z0, &mask, &c, &m, &s, &params, alpha, &mut seeded(3), |_| {}).unwrap();

            let mut rng = seeded(3);
            let eps = LatentVideo::standard_normal(SHAPE, &mut rng);
            let k = noise_level_to_step(alpha, 1000).unwrap();
            let mut z = add_noise(&z0, &eps, k, &s).unwrap();
            for w in sub_trajectory(k, 50).windows(2) {
                let pred = m.predict(&z, w[0], &c);
                z = sampler_step(&z, &pred, w[0], w[1], &s).unwrap();
            }
            assert_eq!(out, z);
        }
    }

    #[test]
    fn unmasked_region_tracks_forward_trajectory() {
        for kind in [ScheduleKind::Ddpm, ScheduleKind::RectifiedFlow] {
            let (s, m) = setup(kind);
            let z0 = LatentVideo::standard_normal(SHAPE, &mut seeded(4));
            let mask = half_mask();
            let c = Conditioning::standard_normal(3, &mut seeded(5));
            let mut steps = 0;
            let out = corrupt_local_at(
                &z0,
                &mask,
                &c,
                &m,
                &s,
                &CorruptionParams::default(),
                0.9,
                &mut seeded(6),
                |step| {
                    let expect = add_noise(&z0, step.eps, step.t_next, &s).unwrap();
                    assert_eq!(first_outside_mask_difference(step.fused, &expect, &mask), None);
                    steps += 1;
                },
            )
            .unwrap();
            assert_eq!(steps, 50);
            assert_eq!(first_outside_mask_difference(&out, &z0, &mask), None);
            assert_ne!(out, z0);
        }
    }

    #[test]
    fn rejects_mismatched_mask() {
        let (s, m) = setup(ScheduleKind::Ddpm);
        let z0 = LatentVideo::zeros(SHAPE);
        let wrong = SpatioTemporalMask::ones([2, 4, 2], MaskResolution::Latent);
        let pixel = SpatioTemporalMask::ones([2, 4, 4], MaskResolution::Pixel);
        let c = Conditioning::null(3);
        let p = CorruptionParams::default();
        for mask in [wrong, pixel] {
            assert!(matches!(
                corrupt_local(&z0, &mask, &c, &m, &s, &p, &mut seeded(0)),
                Err(CorruptionError::MaskMismatch { .. })
            ));
        }
    }

    struct NanModel;

    impl Denoiser for NanModel {
        fn predict(&self, z_t: &LatentVideo, _t: usize, _c: &Conditioning) -> LatentVideo {
            LatentVideo::from_raw(z_t.shape(), vec![f64::NAN; z_t.len()])
        }

        fn conditioning_dim(&self) -> usize {
            1
        }
    }

    #[test]
    fn nan_prediction_aborts() {
        let (s, _) = setup(ScheduleKind::Ddpm);
        let z0 = LatentVideo::zeros(SHAPE);
        let err = corrupt_local(
            &z0,
            &half_mask(),
            &Conditioning::null(1),
            &NanModel,
            &s,
            &CorruptionParams::default(),
            &mut seeded(0),
        );
        assert!(matches!(err, Err(CorruptionError::NonFinitePrediction { .. })));
    }

    #[test]
    fn params_validation() {
        let bad = [
            CorruptionParams {
                noise_low: 0.9,
                noise_high: 0.8,
                ..Default::default()
            },
            CorruptionParams {
                noise_low: 0.0,
                ..Default::default()
            },
            CorruptionParams {
                noise_high: 1.0,
                ..Default::default()
            },
            CorruptionParams {
                sampler_steps: 0,
                ..Default::default()
            },
            CorruptionParams {
                guidance_scale: -1.0,
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn build_pair_invariants_and_determinism() {
        let (s, m) = setup(ScheduleKind::Ddpm);
        let mut mc = PairMaskConfig::for_latent(SHAPE, 2, 8, 2);
        mc.pixel.motion = MotionParams::STILL;
        let make = |seed: u64| {
            let mut rng = seeded(seed);
            let c = Conditioning::standard_normal(3, &mut rng);
            let z = LatentVideo::standard_normal(SHAPE, &mut rng);
            build_pair(c, &z, &m, &s, &mc, &CorruptionParams::default(), seed, &mut rng).unwrap()
        };
        for seed in 0..20 {
            let a = make(seed);
            a.validate().unwrap();
            assert!((0.75..=0.95).contains(&a.noise_strength));
            assert!(a.loser.is_f32_exact());
            assert_eq!(a, make(seed));
        }
    }
}
