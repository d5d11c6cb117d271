//! Self-check suites run by `localdpo verify`.
//!
//! Each suite recomputes a property with an independent oracle (point in
//! polygon tests, brute-force pooling, scalar loss formulas, finite
//! differences) and reports one [`CheckResult`] per property.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corruption::{
    corrupt_local_at, first_outside_mask_difference, CorruptionParams, PairMaskConfig, PreferenceTuple,
};
use crate::dataset::{build_dataset, DatasetConfig, WinnerPrior};
use crate::diffusion::{add_noise, DiffusionSchedule, ScheduleKind, ScheduleOptions};
use crate::latent::{Conditioning, LatentVideo};
use crate::losses::{eta, loss_dpo, loss_grad, loss_ra_dpo, loss_total, LossBatchItem, LossWeights};
use crate::mask::{
    generate_mask_3d, generate_shape_tracks, raster::flatten, raster::point_segment_distance, rasterize_tracks,
    ClosedContour, MaskConfig, MaskResolution, Point, SpatioTemporalMask,
};
use crate::models::{LinearGaussianDenoiser, Parametric, TinyConfig, TinyDenoiser};
use crate::rng::{derive_seed, seeded};
use crate::training::sample_items;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Mask,
    Fusion,
    Loss,
    Grad,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask" => Ok(Suite::Mask),
            "fusion" => Ok(Suite::Fusion),
            "loss" => Ok(Suite::Loss),
            "grad" => Ok(Suite::Grad),
            "all" => Ok(Suite::All),
            _ => Err(format!(
                "unknown suite {s:?} (expected mask, fusion, loss, grad or all)"
            )),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Mask => "mask",
            Suite::Fusion => "fusion",
            Suite::Loss => "loss",
            Suite::Grad => "grad",
            Suite::All => "all",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Masks drawn by the mask suite.
    pub masks: usize,
    /// Tuples built by the fusion suite.
    pub tuples: usize,
    /// Random batches in the loss suite.
    pub batches: usize,
    /// Model seeds in the gradient suite.
    pub grad_seeds: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            masks: 100,
            tuples: 50,
            batches: 20,
            grad_seeds: 2,
        }
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Report {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Mask | Suite::All) {
        checks.extend(mask_suite(opts));
    }
    if matches!(suite, Suite::Fusion | Suite::All) {
        checks.extend(fusion_suite(opts));
    }
    if matches!(suite, Suite::Loss | Suite::All) {
        checks.extend(loss_suite(opts));
    }
    if matches!(suite, Suite::Grad | Suite::All) {
        checks.extend(grad_suite(opts));
    }
    Report {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn check(suite: &str, name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        suite: suite.into(),
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

/// Crossing-number point-in-polygon test (W. R. Franklin's formulation).
pub fn point_in_polygon(poly: &[Point], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi.y > y) != (pj.y > y) && x < (pj.x - pi.x) * (y - pi.y) / (pj.y - pi.y) + pi.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Smallest distance from `p` to any edge of the closed polygon.
pub fn polygon_distance(poly: &[Point], p: Point) -> f64 {
    (0..poly.len())
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % poly.len()]))
        .fold(f64::INFINITY, f64::min)
}

/// Per-pixel oracle raster of `contour`: a pixel is set when its center is
/// inside the flattened polygon or within `tolerance` of it. The second
/// result marks pixels whose center lies within half a pixel of the outline.
pub fn oracle_raster(
    contour: &ClosedContour,
    height: usize,
    width: usize,
    samples_per_segment: usize,
    tolerance: f64,
) -> (Vec<u8>, Vec<bool>) {
    let poly = flatten(contour, samples_per_segment);
    let mut inside = vec![0u8; height * width];
    let mut boundary = vec![false; height * width];
    for r in 0..height {
        for c in 0..width {
            let p = Point::new(c as f64 + 0.5, r as f64 + 0.5);
            let d = polygon_distance(&poly, p);
            inside[r * width + c] = u8::from(point_in_polygon(&poly, p.x, p.y) || d < tolerance);
            boundary[r * width + c] = d <= 0.5;
        }
    }
    (inside, boundary)
}

/// Brute-force max-pool: each output voxel is the OR over its block.
pub fn block_or(mask: &SpatioTemporalMask, t_factor: usize, s_factor: usize) -> SpatioTemporalMask {
    let [t, h, w] = mask.dims();
    let dims = [t.div_ceil(t_factor), h.div_ceil(s_factor), w.div_ceil(s_factor)];
    let mut out = SpatioTemporalMask::zeros(dims, MaskResolution::Latent);
    for f in 0..dims[0] {
        for r in 0..dims[1] {
            for c in 0..dims[2] {
                let mut any = false;
                for ff in f * t_factor..((f + 1) * t_factor).min(t) {
                    for rr in r * s_factor..((r + 1) * s_factor).min(h) {
                        for cc in c * s_factor..((c + 1) * s_factor).min(w) {
                            any |= mask.get(ff, rr, cc);
                        }
                    }
                }
                out.set(f, r, c, any);
            }
        }
    }
    out
}

/// Count of non-boundary pixels where the mask from `tracks` disagrees with
/// the oracle union.
pub fn raster_disagreements(tracks: &[Vec<ClosedContour>], cfg: &MaskConfig, mask: &SpatioTemporalMask) -> usize {
    let n = cfg.height * cfg.width;
    let mut bad = 0;
    for f in 0..cfg.frames {
        let mut union = vec![0u8; n];
        let mut near = vec![false; n];
        for track in tracks {
            let (inside, boundary) = oracle_raster(
                &track[f],
                cfg.height,
                cfg.width,
                cfg.raster.samples_per_segment,
                cfg.raster.boundary_tolerance,
            );
            for i in 0..n {
                union[i] |= inside[i];
                near[i] |= boundary[i];
            }
        }
        bad += (0..n).filter(|&i| !near[i] && union[i] != mask.frame(f)[i]).count();
    }
    bad
}

// ---------------------------------------------------------------- suites

fn mask_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut disagree = 0;
    let mut problems = Vec::new();
    let mut pool_mismatch = 0;
    for i in 0..opts.masks {
        let cfg = MaskConfig::new(4, 32, 32, 1 + i % 3);
        let s = derive_seed(opts.seed, i as u64);
        let tracks = match generate_shape_tracks(&cfg, &mut seeded(s)) {
            Ok(t) => t,
            Err(e) => {
                problems.push(format!("mask {i}: {e}"));
                continue;
            }
        };
        let mask = rasterize_tracks(&tracks, &cfg);
        disagree += raster_disagreements(&tracks, &cfg, &mask);

        match (
            generate_mask_3d(&cfg, &mut seeded(s)),
            generate_mask_3d(&cfg, &mut seeded(s)),
        ) {
            (Ok(a), Ok(b)) => {
                if a != b {
                    problems.push(format!("mask {i}: not deterministic"));
                }
                if a.is_all_zero() || a.data().iter().any(|&v| v > 1) {
                    problems.push(format!("mask {i}: empty or non-binary"));
                }
                match a.downsample(2, 8, false) {
                    Ok(d) if d == block_or(&a, 2, 8) => {}
                    _ => pool_mismatch += 1,
                }
            }
            (Err(e), _) | (_, Err(e)) => problems.push(format!("mask {i}: {e}")),
        }
    }
    vec![
        check(
            "mask",
            "binary_nonempty_deterministic",
            problems.is_empty(),
            if problems.is_empty() {
                format!("{} masks", opts.masks)
            } else {
                problems.join("; ")
            },
        ),
        check(
            "mask",
            "raster_matches_point_in_polygon_oracle",
            disagree == 0,
            format!("{disagree} non-boundary pixels disagree"),
        ),
        check(
            "mask",
            "downsample_matches_block_or",
            pool_mismatch == 0,
            format!("{pool_mismatch} mismatches"),
        ),
    ]
}

fn fusion_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let shape = [2, 4, 4, 2];
    for kind in [ScheduleKind::Ddpm, ScheduleKind::RectifiedFlow] {
        let schedule = DiffusionSchedule::new(kind, 200, &ScheduleOptions::default()).expect("schedule");
        let model = LinearGaussianDenoiser::new(LatentVideo::filled(shape, 0.3), 0.8, schedule.clone(), 2);
        let params = CorruptionParams {
            sampler_steps: 20,
            ..Default::default()
        };
        let mask_cfg = PairMaskConfig::for_latent(shape, 2, 8, 1);
        let mut bad_steps = 0;
        let mut bad_final = 0;
        let mut errors = Vec::new();
        for i in 0..opts.tuples.max(1) {
            let mut rng = seeded(derive_seed(opts.seed, i as u64));
            let mask = match mask_cfg.latent_mask(&mut rng) {
                Ok(m) => m,
                Err(e) => {
                    errors.push(e.to_string());
                    continue;
                }
            };
            let z0 = LatentVideo::standard_normal(shape, &mut rng);
            let c = Conditioning::standard_normal(2, &mut rng);
            let res = corrupt_local_at(&z0, &mask, &c, &model, &schedule, &params, 0.85, &mut rng, |step| {
                let expect = add_noise(&z0, step.eps, step.t_next, &schedule).expect("shapes");
                if first_outside_mask_difference(step.fused, &expect, &mask).is_some() {
                    bad_steps += 1;
                }
            });
            match res {
                Ok(z) => bad_final += usize::from(first_outside_mask_difference(&z, &z0, &mask).is_some()),
                Err(e) => errors.push(e.to_string()),
            }
        }
        out.push(check(
            "fusion",
            &format!("same_noise_trajectory_{kind}"),
            bad_steps == 0 && errors.is_empty(),
            format!("{bad_steps} steps off the forward trajectory; errors: {errors:?}"),
        ));
        out.push(check(
            "fusion",
            &format!("outside_mask_preserved_{kind}"),
            bad_final == 0 && errors.is_empty(),
            format!("{bad_final} corrupted latents differ outside the mask"),
        ));
    }

    let cfg = DatasetConfig {
        latent_shape: [2, 4, 4, 2],
        cond_dim: 2,
        total_steps: 200,
        winners: WinnerPrior {
            channel_means: vec![0.5, -0.5],
            ..Default::default()
        },
        corruption: CorruptionParams {
            sampler_steps: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let res = build_dataset(&cfg, opts.tuples.max(1), opts.seed);
    let (passed, detail) = match &res {
        Ok((tuples, _)) => {
            let bad = tuples.iter().filter(|t| t.validate().is_err()).count();
            (
                bad == 0,
                format!("{bad} of {} built tuples violate invariants", tuples.len()),
            )
        }
        Err(e) => (false, e.to_string()),
    };
    out.push(check("fusion", "built_tuples_valid", passed, detail));
    out
}

fn tiny(shape: [usize; 4], seed: u64) -> TinyDenoiser {
    let cfg = TinyConfig {
        latent_shape: shape,
        patch: [1, 2, 2],
        hidden: 6,
        cond_dim: 2,
        time_embed_dim: 4,
        total_steps: 100,
        ..TinyConfig::default()
    };
    TinyDenoiser::init(cfg, seed)
}

fn random_tuples(shape: [usize; 4], n: usize, seed: u64, full_mask: bool, alpha: Option<f64>) -> Vec<PreferenceTuple> {
    (0..n)
        .map(|i| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            let winner = LatentVideo::standard_normal(shape, &mut rng);
            let loser = LatentVideo::standard_normal(shape, &mut rng);
            let dims = [shape[0], shape[1], shape[2]];
            let mask = if full_mask {
                SpatioTemporalMask::ones(dims, MaskResolution::Latent)
            } else {
                let data: Vec<u8> = (0..dims.iter().product::<usize>())
                    .map(|_| u8::from(crate::rng::uniform(&mut rng, 0.0, 1.0) < 0.4))
                    .collect();
                let mut m = SpatioTemporalMask::new(dims, MaskResolution::Latent, data).expect("binary");
                if m.is_all_zero() {
                    m.set(0, 0, 0, true);
                }
                m
            };
            let a = alpha.unwrap_or_else(|| crate::rng::uniform(&mut rng, 0.75, 0.95));
            PreferenceTuple {
                conditioning: Conditioning::standard_normal(2, &mut rng),
                winner,
                loser,
                mask,
                noise_strength: a,
                noise_range: (0.75, 0.95),
                seed: i as u64,
            }
        })
        .collect()
}

fn perturbed(m: &TinyDenoiser, scale: f64, seed: u64) -> TinyDenoiser {
    let mut out = m.clone();
    let noise = LatentVideo::standard_normal([1, 1, 1, out.params().len()], &mut seeded(seed));
    for (p, n) in out.params_mut().iter_mut().zip(noise.data()) {
        *p += scale * n;
    }
    out
}

fn loss_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let shape = [2, 4, 4, 1];
    let schedule = DiffusionSchedule::new(ScheduleKind::Ddpm, 100, &ScheduleOptions::default()).expect("schedule");
    let w = LossWeights::default();
    let mut collapse_err: f64 = 0.0;
    let mut fix_err: f64 = 0.0;
    let mut errors = Vec::new();
    for b in 0..opts.batches.max(1) {
        let s = derive_seed(opts.seed, b as u64);
        let reference = tiny(shape, s);
        let model = perturbed(&reference, 0.05, s ^ 1);
        let full = random_tuples(shape, 4, s, true, Some(w.alpha_low));
        let items = sample_items(&full, &schedule, false, s);
        match (
            loss_ra_dpo(&items, &model, &reference, &w, &schedule),
            loss_dpo(&items, &model, &reference, &w, &schedule),
        ) {
            (Ok(a), Ok(d)) => collapse_err = collapse_err.max((a - d).abs()),
            (Err(e), _) | (_, Err(e)) => errors.push(e.to_string()),
        }
        let masked = random_tuples(shape, 4, s ^ 2, false, None);
        let items = sample_items(&masked, &schedule, false, s);
        match loss_total(&items, &reference, &reference, &w, &schedule) {
            Ok(bd) => fix_err = fix_err.max((bd.ra - LN_2).abs()).max((bd.dpo - LN_2).abs()),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let eta_ok = eta(0.75, 0.75, 0.95) == Ok(0.0) && eta(0.95, 0.75, 0.95) == Ok(1.0);
    vec![
        check(
            "loss",
            "collapse_identity",
            collapse_err <= 1e-10 && errors.is_empty(),
            format!("max |L_RA - L_DPO| = {collapse_err:e}; errors: {errors:?}"),
        ),
        check(
            "loss",
            "reference_fixpoint_ln2",
            fix_err <= 1e-9 && errors.is_empty(),
            format!("max |L - ln 2| = {fix_err:e}"),
        ),
        check("loss", "eta_endpoints", eta_ok, "eta(0.75) = 0, eta(0.95) = 1"),
    ]
}

/// Largest relative error of `loss_grad` against central differences.
pub fn gradient_check(
    model: &TinyDenoiser,
    reference: &TinyDenoiser,
    batch: &[LossBatchItem<'_>],
    weights: &LossWeights,
    schedule: &DiffusionSchedule,
    h: f64,
) -> Result<f64, crate::losses::LossError> {
    let (_, g) = loss_grad(batch, model, reference, weights, schedule)?;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for i in 0..g.len() {
        let p0 = model.params()[i];
        probe.params_mut()[i] = p0 + h;
        let lp = loss_total(batch, &probe, reference, weights, schedule)?.total;
        probe.params_mut()[i] = p0 - h;
        let lm = loss_total(batch, &probe, reference, weights, schedule)?.total;
        probe.params_mut()[i] = p0;
        let fd = (lp - lm) / (2.0 * h);
        let scale = g[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((g[i] - fd).abs() / scale);
    }
    Ok(worst)
}

fn grad_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let shape = [2, 4, 4, 1];
    let mut out = Vec::new();
    for kind in [ScheduleKind::Ddpm, ScheduleKind::RectifiedFlow] {
        let schedule = DiffusionSchedule::new(kind, 100, &ScheduleOptions::default()).expect("schedule");
        let w = LossWeights {
            beta: 2.0,
            ..Default::default()
        };
        let mut worst: f64 = 0.0;
        let mut errors = Vec::new();
        for k in 0..opts.grad_seeds.max(1) {
            let s = derive_seed(opts.seed, 1000 + k as u64);
            let reference = tiny(shape, s);
            let model = perturbed(&reference, 0.05, s ^ 3);
            let tuples = random_tuples(shape, 3, s, false, None);
            let items = sample_items(&tuples, &schedule, false, s);
            match gradient_check(&model, &reference, &items, &w, &schedule, 1e-4) {
                Ok(e) => worst = worst.max(e),
                Err(e) => errors.push(e.to_string()),
            }
        }
        out.push(check(
            "grad",
            &format!("finite_differences_{kind}"),
            worst <= 1e-4 && errors.is_empty(),
            format!("max relative error {worst:e}"),
        ));
    }
    out
}
