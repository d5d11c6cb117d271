use crate::diffusion::{Denoiser, DiffusionSchedule, ScheduleKind};
use crate::latent::{Conditioning, LatentVideo};

/// Closed-form posterior-mean predictor for `z₀ ~ N(prior_mean, prior_variance·I)`.
///
/// With `z_t = a·z₀ + b·ε` the posterior means are
/// `E[z₀|z_t] = μ + a·v/(a²v + b²)·(z_t − aμ)` and
/// `E[ε|z_t] = b/(a²v + b²)·(z_t − aμ)`; the prediction is `E[ε|z_t]` for ddpm
/// and `E[ε|z_t] − E[z₀|z_t]` for rectified flow. Conditioning is ignored.
#[derive(Debug, Clone)]
pub struct LinearGaussianDenoiser {
    prior_mean: LatentVideo,
    prior_variance: f64,
    schedule: DiffusionSchedule,
    cond_dim: usize,
}

impl LinearGaussianDenoiser {
    pub fn new(prior_mean: LatentVideo, prior_variance: f64, schedule: DiffusionSchedule, cond_dim: usize) -> Self {
        assert!(
            prior_variance > 0.0 && prior_variance.is_finite(),
            "prior variance must be positive, got {prior_variance}"
        );
        Self {
            prior_mean,
            prior_variance,
            schedule,
            cond_dim,
        }
    }

    pub fn prior_mean(&self) -> &LatentVideo {
        &self.prior_mean
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
}

impl Denoiser for LinearGaussianDenoiser {
    fn predict(&self, z_t: &LatentVideo, t: usize, _c: &Conditioning) -> LatentVideo {
        assert_eq!(z_t.shape(), self.prior_mean.shape(), "latent shape mismatch");
        let (a, b) = self.schedule.scales(t);
        let v = self.prior_variance;
        let denom = a * a * v + b * b;
        let gain_z0 = a * v / denom;
        let gain_eps = b / denom;
        let kind = self.schedule.kind();
        let data = z_t
            .data()
            .iter()
            .zip(self.prior_mean.data())
            .map(|(&z, &mu)| {
                let resid = z - a * mu;
                let eps = gain_eps * resid;
                match kind {
                    ScheduleKind::Ddpm => eps,
                    ScheduleKind::RectifiedFlow => eps - (mu + gain_z0 * resid),
                }
            })
            .collect();
        LatentVideo::from_raw(z_t.shape(), data)
    }

    fn conditioning_dim(&self) -> usize {
        self.cond_dim
    }
}
