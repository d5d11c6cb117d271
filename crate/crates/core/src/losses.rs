//! Training objectives and their parameter gradients.
//!
//! For a winner/loser pair noised to the same step, the implicit reward gap
//! of each sample is
//!
//! ```text
//! Δ  = ‖y − f_θ‖² − ‖y − f_ref‖²
//! Δ′ = (N/|M|)·(‖M⊙(y − f_θ)‖² − ‖M⊙(y − f_ref)‖²)
//! ```
//!
//! with `N = T′·H′·W′` and the mask broadcast over channels. The objectives
//! are means over the batch of
//!
//! ```text
//! L_DPO = softplus(β·(Δ_w − Δ_l))
//! L_RA  = softplus(β·(1 + η(α))·(Δ′_w − Δ′_l))
//! L_SFT = ‖y_w − f_θ‖²
//! ```
//!
//! and the total is `λ_RA·L_RA + λ_DPO·L_DPO + λ_SFT·L_SFT`. Norms are plain
//! sums of squares.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::PreferenceTuple;
use crate::diffusion::{add_noise, target, Denoiser, DiffusionError, DiffusionSchedule, GradientUnsupported};
use crate::latent::{Conditioning, LatentError, LatentVideo};
use crate::mask::SpatioTemporalMask;

/// Default DPO temperature for the desk-scale model.
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask dims {mask:?} do not match latent dims {latent:?}")]
    MaskShape { mask: [usize; 3], latent: [usize; 3] },
    #[error("noise strength {alpha} outside [{low}, {high}]")]
    NoiseStrength { alpha: f64, low: f64, high: f64 },
    #[error("timestep {t} outside [1, {total}]")]
    Timestep { t: usize, total: usize },
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Gradient(#[from] GradientUnsupported),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_ra: f64,
    pub lambda_dpo: f64,
    pub lambda_sft: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            lambda_ra: 1.0,
            lambda_dpo: 1.0,
            lambda_sft: 0.1,
            alpha_low: 0.75,
            alpha_high: 0.95,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidWeights(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive and finite, got {}", self.beta));
        }
        for (name, v) in [
            ("lambda_ra", self.lambda_ra),
            ("lambda_dpo", self.lambda_dpo),
            ("lambda_sft", self.lambda_sft),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.alpha_low < self.alpha_high && self.alpha_low.is_finite() && self.alpha_high.is_finite()) {
            return bad(format!(
                "need alpha_low < alpha_high, got ({}, {})",
                self.alpha_low, self.alpha_high
            ));
        }
        Ok(())
    }
}

/// A tuple together with the timestep and noise used to evaluate it.
#[derive(Debug, Clone)]
pub struct LossBatchItem<'a> {
    pub tuple: &'a PreferenceTuple,
    pub t: usize,
    pub eps_w: LatentVideo,
    pub eps_l: LatentVideo,
}

impl<'a> LossBatchItem<'a> {
    /// Draw `t ~ U{1..=T}`, then `ε_w`, then `ε_l` unless `shared_noise`.
    pub fn sample(tuple: &'a PreferenceTuple, total_steps: usize, shared_noise: bool, rng: &mut impl Rng) -> Self {
        let t = rng.random_range(1..=total_steps);
        let shape = tuple.winner.shape();
        let eps_w = LatentVideo::standard_normal(shape, rng);
        let eps_l = if shared_noise {
            eps_w.clone()
        } else {
            LatentVideo::standard_normal(shape, rng)
        };
        Self { tuple, t, eps_w, eps_l }
    }
}

/// `softplus(x) = ln(1 + eˣ) = −ln σ(−x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(α − α_l)/(α_h − α_l)`.
pub fn eta(alpha: f64, alpha_low: f64, alpha_high: f64) -> Result<f64, LossError> {
    if !(alpha >= alpha_low && alpha <= alpha_high) || alpha_low >= alpha_high {
        return Err(LossError::NoiseStrength {
            alpha,
            low: alpha_low,
            high: alpha_high,
        });
    }
    Ok((alpha - alpha_low) / (alpha_high - alpha_low))
}

fn check_mask(mask: &SpatioTemporalMask, z: &LatentVideo) -> Result<(), LossError> {
    let latent = [z.frames(), z.height(), z.width()];
    if mask.dims() != latent {
        return Err(LossError::MaskShape {
            mask: mask.dims(),
            latent,
        });
    }
    if mask.is_all_zero() {
        return Err(LossError::EmptyMask);
    }
    Ok(())
}

/// `Σ (y − f)²` over entries whose voxel is in `mask` (all entries if none).
fn sq_err(y: &LatentVideo, f: &LatentVideo, mask: Option<&SpatioTemporalMask>) -> f64 {
    let ch = y.channels();
    y.data()
        .iter()
        .zip(f.data())
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.data()[i / ch] == 1))
        .map(|(_, (a, b))| (a - b) * (a - b))
        .sum()
}

/// `N/|M|` for a validated mask.
fn mask_scale(mask: &SpatioTemporalMask) -> f64 {
    mask.len() as f64 / mask.count_ones() as f64
}

/// Δ for a noised latent `z_t` with regression target `y`.
pub fn delta<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    model: &M,
    reference: &R,
    z_t: &LatentVideo,
    t: usize,
    c: &Conditioning,
    y: &LatentVideo,
) -> Result<f64, LossError> {
    z_t.check_same_shape(y)?;
    let f = model.predict(z_t, t, c);
    let r = reference.predict(z_t, t, c);
    Ok(sq_err(y, &f, None) - sq_err(y, &r, None))
}

/// Δ′ for a noised latent `z_t` with regression target `y`.
pub fn delta_masked<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    model: &M,
    reference: &R,
    z_t: &LatentVideo,
    t: usize,
    c: &Conditioning,
    y: &LatentVideo,
    mask: &SpatioTemporalMask,
) -> Result<f64, LossError> {
    z_t.check_same_shape(y)?;
    check_mask(mask, y)?;
    let f = model.predict(z_t, t, c);
    let r = reference.predict(z_t, t, c);
    Ok(mask_scale(mask) * (sq_err(y, &f, Some(mask)) - sq_err(y, &r, Some(mask))))
}

/// Everything the losses and their gradient need from one item.
struct ItemEval {
    z_w: LatentVideo,
    z_l: LatentVideo,
    /// `y − f_θ` for winner and loser.
    err_w: LatentVideo,
    err_l: LatentVideo,
    delta_w: f64,
    delta_l: f64,
    delta_masked_w: f64,
    delta_masked_l: f64,
    sft: f64,
    eta: f64,
    mask_scale: f64,
}

impl ItemEval {
    fn dpo_arg(&self, w: &LossWeights) -> f64 {
        w.beta * (self.delta_w - self.delta_l)
    }

    fn ra_arg(&self, w: &LossWeights) -> f64 {
        w.beta * (1.0 + self.eta) * (self.delta_masked_w - self.delta_masked_l)
    }

    fn margin(&self) -> f64 {
        self.delta_masked_l - self.delta_masked_w
    }
}

fn evaluate<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    item: &LossBatchItem<'_>,
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<ItemEval, LossError> {
    let tup = item.tuple;
    let total = schedule.total_steps();
    if item.t == 0 || item.t > total {
        return Err(LossError::Timestep { t: item.t, total });
    }
    tup.winner.check_same_shape(&tup.loser)?;
    tup.winner.check_same_shape(&item.eps_w)?;
    tup.loser.check_same_shape(&item.eps_l)?;
    check_mask(&tup.mask, &tup.winner)?;
    let eta = eta(tup.noise_strength, weights.alpha_low, weights.alpha_high)?;
    let kind = schedule.kind();
    let c = &tup.conditioning;

    let z_w = add_noise(&tup.winner, &item.eps_w, item.t, schedule)?;
    let z_l = add_noise(&tup.loser, &item.eps_l, item.t, schedule)?;
    let y_w = target(&tup.winner, &item.eps_w, kind)?;
    let y_l = target(&tup.loser, &item.eps_l, kind)?;
    let (f_w, r_w) = (model.predict(&z_w, item.t, c), reference.predict(&z_w, item.t, c));
    let (f_l, r_l) = (model.predict(&z_l, item.t, c), reference.predict(&z_l, item.t, c));

    let m = &tup.mask;
    let scale = mask_scale(m);
    let sft = sq_err(&y_w, &f_w, None);
    Ok(ItemEval {
        delta_w: sft - sq_err(&y_w, &r_w, None),
        delta_l: sq_err(&y_l, &f_l, None) - sq_err(&y_l, &r_l, None),
        delta_masked_w: scale * (sq_err(&y_w, &f_w, Some(m)) - sq_err(&y_w, &r_w, Some(m))),
        delta_masked_l: scale * (sq_err(&y_l, &f_l, Some(m)) - sq_err(&y_l, &r_l, Some(m))),
        sft,
        eta,
        mask_scale: scale,
        err_w: y_w.sub(&f_w),
        err_l: y_l.sub(&f_l),
        z_w,
        z_l,
    })
}

fn evaluate_batch<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<Vec<ItemEval>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    weights.validate()?;
    batch
        .par_iter()
        .map(|item| evaluate(item, model, reference, weights, schedule))
        .collect()
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

pub fn loss_dpo<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<f64, LossError> {
    let evals = evaluate_batch(batch, model, reference, weights, schedule)?;
    Ok(mean(evals.iter().map(|e| softplus(e.dpo_arg(weights))), evals.len()))
}

pub fn loss_ra_dpo<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<f64, LossError> {
    let evals = evaluate_batch(batch, model, reference, weights, schedule)?;
    Ok(mean(evals.iter().map(|e| softplus(e.ra_arg(weights))), evals.len()))
}

/// Mean squared target error on the winners.
pub fn loss_sft<M: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    schedule: &DiffusionSchedule,
) -> Result<f64, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let kind = schedule.kind();
    let terms: Vec<f64> = batch
        .par_iter()
        .map(|item| {
            let w = &item.tuple.winner;
            w.check_same_shape(&item.eps_w)?;
            let z = add_noise(w, &item.eps_w, item.t, schedule)?;
            let y = target(w, &item.eps_w, kind)?;
            Ok(sq_err(&y, &model.predict(&z, item.t, &item.tuple.conditioning), None))
        })
        .collect::<Result<_, LossError>>()?;
    Ok(mean(terms.into_iter(), batch.len()))
}

/// Per-term values of the hybrid objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ra: f64,
    pub dpo: f64,
    pub sft: f64,
    /// Mean of `Δ′_l − Δ′_w`; positive when the model favours winners.
    pub mean_margin: f64,
    /// Mean of `−β(1 + η)(Δ′_w − Δ′_l)`.
    pub mean_ra_arg: f64,
}

fn breakdown(evals: &[ItemEval], w: &LossWeights) -> LossBreakdown {
    let n = evals.len();
    let ra = mean(evals.iter().map(|e| softplus(e.ra_arg(w))), n);
    let dpo = mean(evals.iter().map(|e| softplus(e.dpo_arg(w))), n);
    let sft = mean(evals.iter().map(|e| e.sft), n);
    LossBreakdown {
        total: w.lambda_ra * ra + w.lambda_dpo * dpo + w.lambda_sft * sft,
        ra,
        dpo,
        sft,
        mean_margin: mean(evals.iter().map(ItemEval::margin), n),
        mean_ra_arg: mean(evals.iter().map(|e| -e.ra_arg(w)), n),
    }
}

pub fn loss_total<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<LossBreakdown, LossError> {
    let evals = evaluate_batch(batch, model, reference, weights, schedule)?;
    Ok(breakdown(&evals, weights))
}

/// Per-item `Δ′_l − Δ′_w`.
pub fn item_margins<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>, LossError> {
    let evals = evaluate_batch(batch, model, reference, weights, schedule)?;
    Ok(evals.iter().map(ItemEval::margin).collect())
}

/// Loss breakdown and `∂L_total/∂θ`. Items are differentiated in parallel
/// and summed in batch order.
pub fn loss_grad<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    batch: &[LossBatchItem<'_>],
    model: &M,
    reference: &R,
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
) -> Result<(LossBreakdown, Vec<f64>), LossError> {
    let evals = evaluate_batch(batch, model, reference, weights, schedule)?;
    let n_params = model.num_params();
    let inv_b = 1.0 / batch.len() as f64;
    let w = weights;

    let per_item: Vec<Vec<f64>> = batch
        .par_iter()
        .zip(&evals)
        .map(|(item, e)| {
            let ch = e.err_w.channels();
            let mask = item.tuple.mask.data();
            let g_dpo = w.lambda_dpo * sigmoid(e.dpo_arg(w)) * w.beta;
            let g_ra = w.lambda_ra * sigmoid(e.ra_arg(w)) * w.beta * (1.0 + e.eta) * e.mask_scale;
            let g_sft = w.lambda_sft;
            // dL/df for f = f_θ(z_t): each squared error ‖y − f‖² contributes −2(y − f).
            let upstream = |err: &LatentVideo, sign: f64, sft: f64| {
                let data = err
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let m = if mask[i / ch] == 1 { g_ra } else { 0.0 };
                        -2.0 * r * inv_b * (sign * (g_dpo + m) + sft)
                    })
                    .collect();
                LatentVideo::from_raw(err.shape(), data)
            };
            let mut grad = vec![0.0; n_params];
            let c = &item.tuple.conditioning;
            model.vjp(&e.z_w, item.t, c, &upstream(&e.err_w, 1.0, g_sft), &mut grad)?;
            model.vjp(&e.z_l, item.t, c, &upstream(&e.err_l, -1.0, 0.0), &mut grad)?;
            Ok(grad)
        })
        .collect::<Result<_, LossError>>()?;

    let mut grad = vec![0.0; n_params];
    for g in per_item {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((breakdown(&evals, weights), grad))
}
