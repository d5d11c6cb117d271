//! Noise schedules, forward noising, prediction targets, deterministic
//! sampler steps and classifier-free guidance for the two conventions:
//!
//! * `ddpm`: `z_t = √ā_t·z₀ + √(1−ā_t)·ε`, the model predicts `ε`;
//! * `rectified_flow`: `z_t = (1−τ_t)·z₀ + τ_t·ε`, the model predicts the
//!   velocity `ε − z₀`.
//!
//! Timesteps are integer indices in `0..=T` everywhere; `t = 0` is clean data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{Conditioning, LatentError, LatentVideo};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("unknown schedule kind {0:?} (expected \"ddpm\" or \"rectified_flow\")")]
    InvalidKind(String),
    #[error("total steps must be >= 1")]
    ZeroSteps,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 0..={total}")]
    TimestepOutOfRange { t: usize, total: usize },
    #[error("sampler step order violated: t={t}, t_next={t_next}")]
    StepOrder { t: usize, t_next: usize },
    #[error("noise level {0} outside (0, 1]")]
    NoiseLevel(f64),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Ddpm,
    RectifiedFlow,
}

impl FromStr for ScheduleKind {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddpm" => Ok(ScheduleKind::Ddpm),
            "rectified_flow" | "rectified-flow" => Ok(ScheduleKind::RectifiedFlow),
            other => Err(DiffusionError::InvalidKind(other.to_string())),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Ddpm => "ddpm",
            ScheduleKind::RectifiedFlow => "rectified_flow",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Per-step coefficient table of length `T + 1`. For `ddpm` the entries are
/// `ā_t` (signal variance), for `rectified_flow` the interpolation time `τ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr")]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    total_steps: usize,
    coefficients: Vec<f64>,
}

#[derive(Deserialize)]
struct ScheduleRepr {
    kind: ScheduleKind,
    total_steps: usize,
    coefficients: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for DiffusionSchedule {
    type Error = DiffusionError;

    fn try_from(r: ScheduleRepr) -> Result<Self, Self::Error> {
        Self::from_table(r.kind, r.total_steps, r.coefficients)
    }
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, total_steps: usize, opts: &ScheduleOptions) -> Result<Self, DiffusionError> {
        if total_steps == 0 {
            return Err(DiffusionError::ZeroSteps);
        }
        let coefficients = match kind {
            ScheduleKind::Ddpm => {
                let mut table = Vec::with_capacity(total_steps + 1);
                let mut alpha_bar = 1.0;
                table.push(alpha_bar);
                for s in 0..total_steps {
                    let beta = if total_steps == 1 {
                        opts.beta_start
                    } else {
                        opts.beta_start + (opts.beta_end - opts.beta_start) * s as f64 / (total_steps - 1) as f64
                    };
                    alpha_bar *= 1.0 - beta;
                    table.push(alpha_bar);
                }
                table
            }
            ScheduleKind::RectifiedFlow => (0..=total_steps).map(|t| t as f64 / total_steps as f64).collect(),
        };
        Self::from_table(kind, total_steps, coefficients)
    }

    /// Build from an explicit table, checking the monotonicity invariants.
    pub fn from_table(kind: ScheduleKind, total_steps: usize, coefficients: Vec<f64>) -> Result<Self, DiffusionError> {
        let invalid = |m: String| Err(DiffusionError::InvalidSchedule(m));
        if total_steps == 0 {
            return Err(DiffusionError::ZeroSteps);
        }
        if coefficients.len() != total_steps + 1 {
            return invalid(format!(
                "table has {} entries, expected {}",
                coefficients.len(),
                total_steps + 1
            ));
        }
        match kind {
            ScheduleKind::Ddpm => {
                if coefficients[0] != 1.0 {
                    return invalid("ddpm signal variance at t=0 must be 1".into());
                }
                if coefficients.windows(2).any(|w| !(w[1] < w[0])) {
                    return invalid("ddpm signal variance must be strictly decreasing".into());
                }
                if !(coefficients[total_steps] > 0.0) {
                    return invalid("ddpm signal variance must stay positive".into());
                }
            }
            ScheduleKind::RectifiedFlow => {
                if coefficients[0] != 0.0 || coefficients[total_steps] != 1.0 {
                    return invalid("rectified-flow time must run from 0 to 1".into());
                }
                if coefficients.windows(2).any(|w| !(w[1] > w[0])) {
                    return invalid("rectified-flow time must be strictly increasing".into());
                }
            }
        }
        Ok(Self {
            kind,
            total_steps,
            coefficients,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `ā_t` for ddpm; `(1−τ_t)²` for rectified flow.
    pub fn signal_variance(&self, t: usize) -> f64 {
        let (a, _) = self.scales(t);
        a * a
    }

    /// `(signal scale, noise scale)` such that `z_t = a·z₀ + b·ε`.
    pub fn scales(&self, t: usize) -> (f64, f64) {
        let v = self.coefficients[t];
        match self.kind {
            ScheduleKind::Ddpm => (v.sqrt(), (1.0 - v).sqrt()),
            ScheduleKind::RectifiedFlow => (1.0 - v, v),
        }
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.total_steps {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                total: self.total_steps,
            });
        }
        Ok(())
    }
}

pub fn make_schedule(
    kind: &str,
    total_steps: usize,
    opts: &ScheduleOptions,
) -> Result<DiffusionSchedule, DiffusionError> {
    DiffusionSchedule::new(kind.parse()?, total_steps, opts)
}

/// Forward-noise `z0` to step `t`. At `t = 0` this returns `z0` unchanged,
/// bit for bit.
pub fn add_noise(
    z0: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentVideo, DiffusionError> {
    z0.check_same_shape(eps)?;
    schedule.check_t(t)?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let (a, b) = schedule.scales(t);
    Ok(z0.axpby(a, eps, b))
}

/// Regression target: `ε` for ddpm, `ε − z₀` for rectified flow.
pub fn target(z0: &LatentVideo, eps: &LatentVideo, kind: ScheduleKind) -> Result<LatentVideo, DiffusionError> {
    z0.check_same_shape(eps)?;
    Ok(match kind {
        ScheduleKind::Ddpm => eps.clone(),
        ScheduleKind::RectifiedFlow => eps.sub(z0),
    })
}

/// One deterministic step from `t` to `t_next`: DDIM (η = 0) for ddpm, an
/// Euler step for rectified flow.
pub fn sampler_step(
    z_t: &LatentVideo,
    prediction: &LatentVideo,
    t: usize,
    t_next: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentVideo, DiffusionError> {
    z_t.check_same_shape(prediction)?;
    schedule.check_t(t)?;
    if t <= t_next {
        return Err(DiffusionError::StepOrder { t, t_next });
    }
    Ok(match schedule.kind() {
        ScheduleKind::Ddpm => {
            let (a, b) = schedule.scales(t);
            let (a_next, b_next) = schedule.scales(t_next);
            let data = z_t
                .data()
                .iter()
                .zip(prediction.data())
                .map(|(&z, &p)| {
                    let x0 = (z - b * p) / a;
                    a_next * x0 + b_next * p
                })
                .collect();
            LatentVideo::from_raw(z_t.shape(), data)
        }
        ScheduleKind::RectifiedFlow => {
            let d_tau = schedule.coefficients[t] - schedule.coefficients[t_next];
            z_t.axpby(1.0, prediction, -d_tau)
        }
    })
}

/// `k = ⌈T·α⌉`, clamped to `1..=T`. Products within `1e-9` of an integer are
/// snapped to it first so that e.g. `T·0.95` gives 950 and not 951.
pub fn noise_level_to_step(alpha: f64, total_steps: usize) -> Result<usize, DiffusionError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DiffusionError::NoiseLevel(alpha));
    }
    let x = total_steps as f64 * alpha;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    Ok((k as usize).clamp(1, total_steps))
}

/// Evenly spaced, strictly decreasing timesteps from `k` to `0` using at most
/// `steps` sampler steps; indices are rounded down and duplicates dropped.
pub fn sub_trajectory(k: usize, steps: usize) -> Vec<usize> {
    let steps = steps.max(1);
    let mut out: Vec<usize> = (0..=steps).map(|i| k * (steps - i) / steps).collect();
    out.dedup();
    out
}

/// A denoiser `f(z_t, t, c)` predicting the schedule's regression target.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &LatentVideo, t: usize, c: &Conditioning) -> LatentVideo;

    fn conditioning_dim(&self) -> usize;

    /// Number of trainable parameters; zero for fixed models.
    fn num_params(&self) -> usize {
        0
    }

    /// Accumulate `(∂f/∂θ)ᵀ · upstream` into `grad`.
    fn vjp(
        &self,
        _z_t: &LatentVideo,
        _t: usize,
        _c: &Conditioning,
        _upstream: &LatentVideo,
        _grad: &mut [f64],
    ) -> Result<(), GradientUnsupported> {
        Err(GradientUnsupported)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("model does not support parameter gradients")]
pub struct GradientUnsupported;

/// Classifier-free guidance: `u + s·(c − u)`, with the unconditional branch
/// evaluated at `null`. Scales 0 and 1 return the corresponding branch
/// exactly, without evaluating the other one.
pub fn guided_predict<M: Denoiser + ?Sized>(
    model: &M,
    null: &Conditioning,
    z_t: &LatentVideo,
    t: usize,
    c: &Conditioning,
    scale: f64,
) -> LatentVideo {
    if scale == 1.0 {
        return model.predict(z_t, t, c);
    }
    let uncond = model.predict(z_t, t, null);
    if scale == 0.0 {
        return uncond;
    }
    let cond = model.predict(z_t, t, c);
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &p)| u + scale * (p - u))
        .collect();
    LatentVideo::from_raw(z_t.shape(), data)
}
