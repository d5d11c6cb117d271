use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Parametric;
use crate::diffusion::{Denoiser, GradientUnsupported};
use crate::latent::{Conditioning, LatentVideo};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    /// `(frames, height, width, channels)` of the latents it operates on.
    pub latent_shape: [usize; 4],
    /// Patch extent in `(frames, height, width)`; must divide the latent.
    pub patch: [usize; 3],
    pub hidden: usize,
    pub cond_dim: usize,
    /// Even number of sinusoidal timestep features.
    pub time_embed_dim: usize,
    /// Timesteps are normalized by this before embedding.
    pub total_steps: usize,
    pub activation: Activation,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            latent_shape: [4, 8, 8, 4],
            patch: [1, 2, 2],
            hidden: 64,
            cond_dim: 8,
            time_embed_dim: 8,
            total_steps: 1000,
            activation: Activation::Tanh,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<(), String> {
        let [t, h, w, c] = self.latent_shape;
        if t * h * w * c == 0 {
            return Err(format!("latent shape must be positive, got {:?}", self.latent_shape));
        }
        for (dim, p) in [t, h, w].into_iter().zip(self.patch) {
            if p == 0 || dim % p != 0 {
                return Err(format!(
                    "patch {:?} does not tile latent {:?}",
                    self.patch, self.latent_shape
                ));
            }
        }
        if self.hidden == 0 {
            return Err("hidden width must be >= 1".into());
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err("time_embed_dim must be even".into());
        }
        if self.total_steps == 0 {
            return Err("total_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product::<usize>() * self.latent_shape[3]
    }

    pub fn input_len(&self) -> usize {
        self.patch_len() + self.cond_dim + self.time_embed_dim
    }

    pub fn num_params(&self) -> usize {
        let (i, h, o) = (self.input_len(), self.hidden, self.patch_len());
        h * i + h + o * h + o
    }
}

/// Per-patch MLP: `y = W₂·act(W₁·[patch ‖ c ‖ emb(t)] + b₁) + b₂`, with the
/// same weights applied to every non-overlapping patch of the latent.
///
/// Parameters are stored flat as `W₁` (row-major, `hidden × input`), `b₁`,
/// `W₂` (`patch × hidden`), `b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    config: TinyConfig,
    params: Vec<f64>,
    patches: Vec<Vec<usize>>,
}

impl TinyDenoiser {
    pub fn zeros(config: TinyConfig) -> Self {
        config.validate().expect("invalid TinyConfig");
        let params = vec![0.0; config.num_params()];
        let patches = patch_indices(&config);
        Self {
            config,
            params,
            patches,
        }
    }

    /// Uniform fan-in initialization for the weights, zero biases. Weights
    /// are drawn as `f32` so a fresh model round-trips through checkpoints.
    pub fn init(config: TinyConfig, seed: u64) -> Self {
        let mut model = Self::zeros(config);
        let mut rng = seeded(seed);
        let (i, h, o) = (model.config.input_len(), model.config.hidden, model.config.patch_len());
        let (w1, rest) = model.params.split_at_mut(h * i);
        let (_, rest) = rest.split_at_mut(h);
        let (w2, _) = rest.split_at_mut(o * h);
        let s1 = 1.0 / (i as f32).sqrt();
        let s2 = 1.0 / (h as f32).sqrt();
        for w in w1 {
            *w = rng.random_range(-s1..s1) as f64;
        }
        for w in w2 {
            *w = rng.random_range(-s2..s2) as f64;
        }
        model
    }

    pub fn from_params(config: TinyConfig, params: Vec<f64>) -> Result<Self, String> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(format!(
                "expected {} parameters, got {}",
                config.num_params(),
                params.len()
            ));
        }
        let mut model = Self::zeros(config);
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_embed_dim / 2;
        let x = t as f64 / self.config.total_steps as f64;
        let mut emb = Vec::with_capacity(2 * half);
        for i in 0..half {
            emb.push((std::f64::consts::PI * (1u64 << i) as f64 * x).sin());
        }
        for i in 0..half {
            emb.push((std::f64::consts::PI * (1u64 << i) as f64 * x).cos());
        }
        emb
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (i, h, o) = (self.config.input_len(), self.config.hidden, self.config.patch_len());
        let (w1, rest) = self.params.split_at(h * i);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(o * h);
        (w1, b1, w2, b2)
    }

    fn check_inputs(&self, z_t: &LatentVideo, c: &Conditioning) {
        assert_eq!(z_t.shape(), self.config.latent_shape, "latent shape mismatch");
        assert_eq!(c.dim(), self.config.cond_dim, "conditioning dim mismatch");
    }

    /// Fills `input` for one patch; the conditioning and time tail is shared.
    fn load_patch(&self, z: &[f64], patch: &[usize], input: &mut [f64]) {
        for (dst, &idx) in input.iter_mut().zip(patch) {
            *dst = z[idx];
        }
    }

    fn hidden_layer(&self, input: &[f64], pre: &mut [f64], act: &mut [f64]) {
        let (w1, b1, _, _) = self.split();
        let n_in = input.len();
        for (j, (p, a)) in pre.iter_mut().zip(act.iter_mut()).enumerate() {
            let row = &w1[j * n_in..(j + 1) * n_in];
            *p = b1[j] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            *a = match self.config.activation {
                Activation::Tanh => p.tanh(),
                Activation::Identity => *p,
            };
        }
    }

    fn shared_tail(&self, t: usize, c: &Conditioning) -> Vec<f64> {
        let mut input = vec![0.0; self.config.input_len()];
        let pl = self.config.patch_len();
        input[pl..pl + self.config.cond_dim].copy_from_slice(c.as_slice());
        input[pl + self.config.cond_dim..].copy_from_slice(&self.time_embedding(t));
        input
    }
}

fn patch_indices(config: &TinyConfig) -> Vec<Vec<usize>> {
    let [t, h, w, c] = config.latent_shape;
    let [pt, ph, pw] = config.patch;
    let mut patches = Vec::new();
    for f0 in (0..t).step_by(pt) {
        for r0 in (0..h).step_by(ph) {
            for c0 in (0..w).step_by(pw) {
                let mut idx = Vec::with_capacity(pt * ph * pw * c);
                for f in f0..f0 + pt {
                    for r in r0..r0 + ph {
                        for col in c0..c0 + pw {
                            for ch in 0..c {
                                idx.push(((f * h + r) * w + col) * c + ch);
                            }
                        }
                    }
                }
                patches.push(idx);
            }
        }
    }
    patches
}

impl Parametric for TinyDenoiser {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

impl Denoiser for TinyDenoiser {
    fn predict(&self, z_t: &LatentVideo, t: usize, c: &Conditioning) -> LatentVideo {
        self.check_inputs(z_t, c);
        let (_, _, w2, b2) = self.split();
        let hidden = self.config.hidden;
        let mut input = self.shared_tail(t, c);
        let mut pre = vec![0.0; hidden];
        let mut act = vec![0.0; hidden];
        let mut out = vec![0.0; z_t.len()];
        for patch in &self.patches {
            self.load_patch(z_t.data(), patch, &mut input);
            self.hidden_layer(&input, &mut pre, &mut act);
            for (k, &idx) in patch.iter().enumerate() {
                let row = &w2[k * hidden..(k + 1) * hidden];
                out[idx] = b2[k] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
            }
        }
        LatentVideo::from_raw(z_t.shape(), out)
    }

    fn conditioning_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(
        &self,
        z_t: &LatentVideo,
        t: usize,
        c: &Conditioning,
        upstream: &LatentVideo,
        grad: &mut [f64],
    ) -> Result<(), GradientUnsupported> {
        self.check_inputs(z_t, c);
        assert_eq!(upstream.shape(), z_t.shape(), "upstream shape mismatch");
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        let (_, _, w2, _) = self.split();
        let (n_in, hidden, n_out) = (self.config.input_len(), self.config.hidden, self.config.patch_len());
        let (g_w1, rest) = grad.split_at_mut(hidden * n_in);
        let (g_b1, rest) = rest.split_at_mut(hidden);
        let (g_w2, g_b2) = rest.split_at_mut(n_out * hidden);

        let mut input = self.shared_tail(t, c);
        let mut pre = vec![0.0; hidden];
        let mut act = vec![0.0; hidden];
        let mut d_hidden = vec![0.0; hidden];
        let up = upstream.data();
        for patch in &self.patches {
            self.load_patch(z_t.data(), patch, &mut input);
            self.hidden_layer(&input, &mut pre, &mut act);
            d_hidden.fill(0.0);
            for (k, &idx) in patch.iter().enumerate() {
                let g = up[idx];
                if g == 0.0 {
                    continue;
                }
                g_b2[k] += g;
                let row = &w2[k * hidden..(k + 1) * hidden];
                let g_row = &mut g_w2[k * hidden..(k + 1) * hidden];
                for j in 0..hidden {
                    g_row[j] += g * act[j];
                    d_hidden[j] += g * row[j];
                }
            }
            for j in 0..hidden {
                let d_pre = match self.config.activation {
                    Activation::Tanh => d_hidden[j] * (1.0 - act[j] * act[j]),
                    Activation::Identity => d_hidden[j],
                };
                if d_pre == 0.0 {
                    continue;
                }
                g_b1[j] += d_pre;
                let g_row = &mut g_w1[j * n_in..(j + 1) * n_in];
                for (g, x) in g_row.iter_mut().zip(&input) {
                    *g += d_pre * x;
                }
            }
        }
        Ok(())
    }
}
