//! Synthetic desk-scale preference datasets.
//!
//! Winners are Gaussian latents whose per-channel mean depends on the
//! conditioning. Losers come from local corruption by a
//! [`LinearGaussianDenoiser`] with its own (deliberately mismatched) prior,
//! so the corrupted region drifts toward a different distribution.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::{build_pair, CorruptionError, CorruptionParams, PairMaskConfig, PreferenceTuple};
use crate::diffusion::{DiffusionError, DiffusionSchedule, ScheduleKind, ScheduleOptions};
use crate::latent::{Conditioning, LatentVideo};
use crate::mask::{ContourRanges, MotionParams};
use crate::models::{LinearGaussianDenoiser, TinyConfig};
use crate::rng::{derive_seed, normal_f32, seeded};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("tuple {index}: {source}")]
    Tuple {
        index: usize,
        #[source]
        source: CorruptionError,
    },
}

/// Distribution of clean latents:
/// `z[f,h,w,ch] = channel_means[ch] + cond_gain·c[ch mod d] + std·n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WinnerPrior {
    pub channel_means: Vec<f64>,
    pub cond_gain: f64,
    pub std: f64,
}

impl Default for WinnerPrior {
    fn default() -> Self {
        Self {
            channel_means: vec![0.8, -0.6, 0.4, -0.2],
            cond_gain: 0.5,
            std: 0.5,
        }
    }
}

impl WinnerPrior {
    /// `f32`-exact draw; the noise stream is consumed in memory order.
    pub fn sample(&self, shape: [usize; 4], c: &Conditioning, rng: &mut impl Rng) -> LatentVideo {
        let ch = shape[3];
        let mut z = LatentVideo::zeros(shape);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            let k = i % ch;
            let shift = if c.dim() == 0 {
                0.0
            } else {
                self.cond_gain * c.0[k % c.dim()]
            };
            *v = self.channel_means[k] + shift + self.std * normal_f32(rng);
        }
        z.quantize_f32()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub latent_shape: [usize; 4],
    pub cond_dim: usize,
    pub schedule: ScheduleKind,
    pub total_steps: usize,
    pub schedule_options: ScheduleOptions,
    /// Temporal and spatial downsampling from pixel to latent masks.
    pub t_factor: usize,
    pub s_factor: usize,
    pub shapes: usize,
    pub contour_ranges: ContourRanges,
    /// Defaults to [`MotionParams::default_for`] the pixel frame.
    pub motion: Option<MotionParams>,
    pub corruption: CorruptionParams,
    pub winners: WinnerPrior,
    /// Prior of the frozen corruption model.
    pub corruptor_mean: f64,
    pub corruptor_variance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            latent_shape: [4, 8, 8, 4],
            cond_dim: 8,
            schedule: ScheduleKind::Ddpm,
            total_steps: 1000,
            schedule_options: ScheduleOptions::default(),
            t_factor: 2,
            s_factor: 8,
            shapes: 1,
            contour_ranges: ContourRanges::default(),
            motion: None,
            corruption: CorruptionParams::default(),
            winners: WinnerPrior::default(),
            corruptor_mean: 0.0,
            corruptor_variance: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.latent_shape.contains(&0) || self.t_factor == 0 || self.s_factor == 0 || self.shapes == 0 {
            return bad("latent shape, factors and shape count must be positive".into());
        }
        if self.winners.channel_means.len() != self.latent_shape[3] {
            return bad(format!(
                "{} channel means for {} channels",
                self.winners.channel_means.len(),
                self.latent_shape[3]
            ));
        }
        if !(self.corruptor_variance > 0.0 && self.winners.std >= 0.0) {
            return bad("variances must be positive".into());
        }
        self.corruption
            .validate()
            .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
        self.mask_config()
            .pixel
            .validate()
            .map_err(|e| DatasetError::InvalidConfig(e.to_string()))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, DatasetError> {
        Ok(DiffusionSchedule::new(
            self.schedule,
            self.total_steps,
            &self.schedule_options,
        )?)
    }

    pub fn mask_config(&self) -> PairMaskConfig {
        let mut m = PairMaskConfig::for_latent(self.latent_shape, self.t_factor, self.s_factor, self.shapes);
        m.pixel.ranges = self.contour_ranges;
        if let Some(motion) = self.motion {
            m.pixel.motion = motion;
        }
        m
    }

    pub fn corruptor(&self, schedule: &DiffusionSchedule) -> LinearGaussianDenoiser {
        LinearGaussianDenoiser::new(
            LatentVideo::filled(self.latent_shape, self.corruptor_mean),
            self.corruptor_variance,
            schedule.clone(),
            self.cond_dim,
        )
    }

    /// A trainable model sized for these latents.
    pub fn tiny_config(&self) -> TinyConfig {
        TinyConfig {
            latent_shape: self.latent_shape,
            cond_dim: self.cond_dim,
            total_steps: self.total_steps,
            ..TinyConfig::default()
        }
    }
}

/// Build tuple `index` from its own stream `derive_seed(seed, index)`:
/// conditioning, winner, mask, then corruption.
pub fn build_tuple(
    config: &DatasetConfig,
    schedule: &DiffusionSchedule,
    corruptor: &LinearGaussianDenoiser,
    seed: u64,
    index: usize,
) -> Result<PreferenceTuple, DatasetError> {
    let tuple_seed = derive_seed(seed, index as u64);
    let mut rng = seeded(tuple_seed);
    let c = Conditioning::standard_normal(config.cond_dim, &mut rng);
    let winner = config.winners.sample(config.latent_shape, &c, &mut rng);
    build_pair(
        c,
        &winner,
        corruptor,
        schedule,
        &config.mask_config(),
        &config.corruption,
        tuple_seed,
        &mut rng,
    )
    .map_err(|source| DatasetError::Tuple { index, source })
}

/// `count` tuples built in parallel, returned in index order.
pub fn build_dataset(
    config: &DatasetConfig,
    count: usize,
    seed: u64,
) -> Result<(Vec<PreferenceTuple>, DiffusionSchedule), DatasetError> {
    config.validate()?;
    let schedule = config.schedule()?;
    let corruptor = config.corruptor(&schedule);
    let tuples = (0..count)
        .into_par_iter()
        .map(|i| build_tuple(config, &schedule, &corruptor, seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tuples, schedule))
}

/// Summary statistics printed after a build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub count: usize,
    /// Counts of `α` in equal-width bins over `[α_l, α_h]`.
    pub alpha_histogram: Vec<usize>,
    pub coverage_min: f64,
    pub coverage_mean: f64,
    pub coverage_max: f64,
}

impl DatasetSummary {
    pub fn new(tuples: &[PreferenceTuple], bins: usize) -> Self {
        let mut alpha_histogram = vec![0; bins.max(1)];
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for t in tuples {
            let (a, b) = t.noise_range;
            let frac = ((t.noise_strength - a) / (b - a)).clamp(0.0, 1.0);
            let bin = ((frac * alpha_histogram.len() as f64) as usize).min(alpha_histogram.len() - 1);
            alpha_histogram[bin] += 1;
            let cov = t.mask.coverage();
            lo = lo.min(cov);
            hi = hi.max(cov);
            sum += cov;
        }
        Self {
            count: tuples.len(),
            alpha_histogram,
            coverage_min: lo,
            coverage_mean: sum / tuples.len().max(1) as f64,
            coverage_max: hi,
        }
    }
}
