//! AdamW training of a parametric denoiser against a frozen copy of itself.

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::PreferenceTuple;
use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::io::epoch_permutation;
use crate::losses::{item_margins, loss_grad, LossBatchItem, LossError, LossWeights};
use crate::models::Parametric;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("initial parameters are not finite (index {0})")]
    NonFiniteParams(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Rescale the gradient to this norm when it is larger.
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    /// Use one noise draw for both samples of a pair.
    pub shared_noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            weights: LossWeights::default(),
            shared_noise: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0 && self.weight_decay >= 0.0) {
            return bad("epsilon must be > 0 and weight_decay >= 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Metrics of one optimizer step, written as a JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_ra: f64,
    pub loss_dpo: f64,
    pub loss_sft: f64,
    pub mean_margin: f64,
    pub mean_ra_arg: f64,
    pub grad_norm: f64,
}

pub struct TrainState<M> {
    pub model: M,
    reference: M,
    reference_hash: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: usize,
    pub history: Vec<StepMetrics>,
}

/// Order-sensitive hash of the exact parameter bits.
pub fn param_hash(params: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in params {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}

impl<M: Denoiser + Parametric + Clone> TrainState<M> {
    /// Freeze a copy of `model` as the reference and zero the moments.
    pub fn new(model: M) -> Result<Self, TrainError> {
        if let Some(i) = model.params().iter().position(|p| !p.is_finite()) {
            return Err(TrainError::NonFiniteParams(i));
        }
        let n = model.params().len();
        let reference = model.clone();
        Ok(Self {
            reference_hash: param_hash(reference.params()),
            reference,
            model,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn reference(&self) -> &M {
        &self.reference
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// True while the frozen parameters still hash to their initial value.
    pub fn reference_intact(&self) -> bool {
        param_hash(self.reference.params()) == self.reference_hash
    }

    /// One AdamW update on `batch`.
    pub fn train_step(
        &mut self,
        batch: &[LossBatchItem<'_>],
        config: &TrainConfig,
        schedule: &DiffusionSchedule,
    ) -> Result<StepMetrics, TrainError> {
        let step = self.step + 1;
        let (loss, mut grad) = loss_grad(batch, &self.model, &self.reference, &config.weights, schedule)?;
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", step });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { what: "gradient", step });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(clip) = config.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.adamw(&grad, config, step);
        self.step = step;
        let metrics = StepMetrics {
            step,
            loss_total: loss.total,
            loss_ra: loss.ra,
            loss_dpo: loss.dpo,
            loss_sft: loss.sft,
            mean_margin: loss.mean_margin,
            mean_ra_arg: loss.mean_ra_arg,
            grad_norm,
        };
        self.history.push(metrics);
        Ok(metrics)
    }

    fn adamw(&mut self, grad: &[f64], c: &TrainConfig, step: usize) {
        let lr = c.learning_rate;
        let bc1 = 1.0 - c.beta1.powi(step as i32);
        let bc2 = 1.0 - c.beta2.powi(step as i32);
        let params = self.model.params_mut();
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            if c.weight_decay != 0.0 {
                *p -= lr * c.weight_decay * *p;
            }
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

/// Endless stream of dataset indices: one seeded permutation per epoch.
struct BatchCursor {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: 0,
            order: epoch_permutation(n, seed, 0),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.n {
                    self.epoch += 1;
                    self.order = epoch_permutation(self.n, self.seed, self.epoch);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Draw fresh `(t, ε)` for each tuple with the stream keyed by `(seed, step)`.
pub fn sample_items<'a>(
    tuples: impl IntoIterator<Item = &'a PreferenceTuple>,
    schedule: &DiffusionSchedule,
    shared_noise: bool,
    seed: u64,
) -> Vec<LossBatchItem<'a>> {
    let mut rng = seeded(seed);
    tuples
        .into_iter()
        .map(|t| LossBatchItem::sample(t, schedule.total_steps(), shared_noise, &mut rng))
        .collect()
}

/// Run `config.iterations` steps over `dataset`, calling `on_step` after each.
pub fn run_training<M: Denoiser + Parametric + Clone>(
    config: &TrainConfig,
    dataset: &[PreferenceTuple],
    model: M,
    schedule: &DiffusionSchedule,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainState<M>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = TrainState::new(model)?;
    let mut cursor = BatchCursor::new(dataset.len(), derive_seed(config.seed, 0));
    for _ in 0..config.iterations {
        let idx = cursor.next_batch(config.batch_size);
        let noise_seed = derive_seed(config.seed, state.step as u64 + 1);
        let batch = sample_items(
            idx.iter().map(|&i| &dataset[i]),
            schedule,
            config.shared_noise,
            noise_seed,
        );
        let metrics = state.train_step(&batch, config, schedule)?;
        on_step(&metrics);
    }
    Ok(state)
}

/// Largest `β` in `candidates` whose mean region-aware sigmoid argument stays
/// within `±bound` over a `warmup`-step run of `config`. Falls back to the
/// smallest candidate.
pub fn calibrate_beta<M: Denoiser + Parametric + Clone>(
    config: &TrainConfig,
    dataset: &[PreferenceTuple],
    model: &M,
    schedule: &DiffusionSchedule,
    candidates: &[f64],
    warmup: usize,
    bound: f64,
) -> Result<f64, TrainError> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let smallest = *sorted
        .last()
        .ok_or_else(|| TrainError::InvalidConfig("no beta candidates".into()))?;
    for beta in sorted {
        let probe = TrainConfig {
            iterations: warmup,
            weights: LossWeights { beta, ..config.weights },
            ..config.clone()
        };
        let state = run_training(&probe, dataset, model.clone(), schedule, |_| {})?;
        if state.history.iter().all(|m| m.mean_ra_arg.abs() <= bound) {
            return Ok(beta);
        }
    }
    Ok(smallest)
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self { mean, std_error: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// Mean of `Δ′_l − Δ′_w` over `items`; positive when the model favours
/// winners more than the reference does.
pub fn preference_margin<M: Denoiser + ?Sized, R: Denoiser + ?Sized>(
    model: &M,
    reference: &R,
    items: &[LossBatchItem<'_>],
    schedule: &DiffusionSchedule,
    weights: &LossWeights,
) -> Result<Estimate, TrainError> {
    let margins = item_margins(items, model, reference, weights, schedule)?;
    Ok(Estimate::from_samples(&margins))
}

/// Metric history as JSON lines.
pub fn metrics_jsonl(history: &[StepMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}
