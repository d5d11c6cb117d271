//! Full spatio-temporal mask draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::contour::{sample_contour, ClosedContour, ContourParams};
use super::motion::{broadcast_contour, MotionParams};
use super::raster::{rasterize_contour, RasterOptions};
use super::{MaskError, MaskResolution, SpatioTemporalMask};
use crate::rng::uniform;

/// Sampling ranges for per-shape contour parameters. Proposal sizes are
/// fractions of the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourRanges {
    pub vertices: (usize, usize),
    pub corruption_ratio: (f64, f64),
    pub smoothness: (f64, f64),
    pub height_fraction: (f64, f64),
    pub width_fraction: (f64, f64),
}

impl Default for ContourRanges {
    fn default() -> Self {
        Self {
            vertices: (6, 8),
            corruption_ratio: (0.6, 0.8),
            smoothness: (0.2, 0.4),
            height_fraction: (1.0 / 3.0, 1.0),
            width_fraction: (1.0 / 3.0, 1.0),
        }
    }
}

impl ContourRanges {
    /// Draw order: vertex count, ratio, smoothness, height, width.
    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> ContourParams {
        ContourParams {
            num_vertices: rng.random_range(self.vertices.0..=self.vertices.1),
            corruption_ratio: uniform(rng, self.corruption_ratio.0, self.corruption_ratio.1),
            smoothness: uniform(rng, self.smoothness.0, self.smoothness.1),
            proposal_height: uniform(
                rng,
                self.height_fraction.0 * height as f64,
                self.height_fraction.1 * height as f64,
            ),
            proposal_width: uniform(
                rng,
                self.width_fraction.0 * width as f64,
                self.width_fraction.1 * width as f64,
            ),
        }
    }

    fn validate(&self) -> Result<(), MaskError> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = self.vertices.0 >= 3
            && self.vertices.0 <= self.vertices.1
            && ordered(self.corruption_ratio)
            && ordered(self.smoothness)
            && ordered(self.height_fraction)
            && ordered(self.width_fraction)
            && self.height_fraction.0 > 0.0
            && self.height_fraction.1 <= 1.0
            && self.width_fraction.0 > 0.0
            && self.width_fraction.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(MaskError::InvalidParams(format!("bad contour ranges {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of contours `P` per mask.
    pub shapes: usize,
    pub ranges: ContourRanges,
    pub motion: MotionParams,
    pub raster: RasterOptions,
    /// Draw fresh contours in every frame instead of broadcasting the first.
    pub independent_frames: bool,
    pub max_redraws: usize,
}

impl MaskConfig {
    pub fn new(frames: usize, height: usize, width: usize, shapes: usize) -> Self {
        Self {
            frames,
            height,
            width,
            shapes,
            ranges: ContourRanges::default(),
            motion: MotionParams::default_for(height, width),
            raster: RasterOptions::default(),
            independent_frames: false,
            max_redraws: 8,
        }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(MaskError::InvalidParams(format!(
                "frame dims must be positive, got ({}, {}, {})",
                self.frames, self.height, self.width
            )));
        }
        if self.shapes == 0 {
            return Err(MaskError::InvalidParams("shapes must be >= 1".into()));
        }
        if self.max_redraws == 0 {
            return Err(MaskError::InvalidParams("max_redraws must be >= 1".into()));
        }
        self.ranges.validate()?;
        self.motion.validate()
    }
}

/// Per-shape, per-frame contours for one draw. Stream order is, per shape:
/// contour params, anchors, placement, then motion for frames `1..frames`.
pub fn generate_shape_tracks(cfg: &MaskConfig, rng: &mut impl Rng) -> Result<Vec<Vec<ClosedContour>>, MaskError> {
    cfg.validate()?;
    (0..cfg.shapes)
        .map(|_| {
            if cfg.independent_frames {
                (0..cfg.frames)
                    .map(|_| {
                        let params = cfg.ranges.sample(cfg.height, cfg.width, rng);
                        sample_contour(&params, cfg.height, cfg.width, rng)
                    })
                    .collect()
            } else {
                let params = cfg.ranges.sample(cfg.height, cfg.width, rng);
                let first = sample_contour(&params, cfg.height, cfg.width, rng)?;
                broadcast_contour(&first, cfg.frames, &cfg.motion, cfg.height, cfg.width, rng)
            }
        })
        .collect()
}

/// Union of all tracks, frame by frame.
pub fn rasterize_tracks(tracks: &[Vec<ClosedContour>], cfg: &MaskConfig) -> SpatioTemporalMask {
    let mut mask = SpatioTemporalMask::zeros([cfg.frames, cfg.height, cfg.width], MaskResolution::Pixel);
    for track in tracks {
        for (f, contour) in track.iter().enumerate() {
            let frame = rasterize_contour(contour, cfg.height, cfg.width, &cfg.raster);
            mask.or_frame(f, &frame);
        }
    }
    mask
}

/// Draw a pixel-space mask; redraws everything if the union comes out empty.
pub fn generate_mask_3d(cfg: &MaskConfig, rng: &mut impl Rng) -> Result<SpatioTemporalMask, MaskError> {
    for _ in 0..cfg.max_redraws {
        let tracks = generate_shape_tracks(cfg, rng)?;
        let mask = rasterize_tracks(&tracks, cfg);
        if !mask.is_all_zero() {
            return Ok(mask);
        }
    }
    Err(MaskError::EmptyMask {
        attempts: cfg.max_redraws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn defaults_match_supplementary_ranges() {
        let r = ContourRanges::default();
        let mut rng = seeded(0);
        for _ in 0..200 {
            let p = r.sample(96, 96, &mut rng);
            assert!((6..=8).contains(&p.num_vertices));
            assert!((0.6..=0.8).contains(&p.corruption_ratio));
            assert!((0.2..=0.4).contains(&p.smoothness));
            assert!(p.proposal_height >= 32.0 && p.proposal_height <= 96.0);
            assert!(p.proposal_width >= 32.0 && p.proposal_width <= 96.0);
        }
    }

    #[test]
    fn masks_are_binary_nonempty_deterministic() {
        let cfg = MaskConfig::new(8, 48, 48, 3);
        for seed in 0..10 {
            let a = generate_mask_3d(&cfg, &mut seeded(seed)).unwrap();
            let b = generate_mask_3d(&cfg, &mut seeded(seed)).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|&v| v <= 1));
            assert!(!a.is_all_zero());
        }
    }

    #[test]
    fn still_motion_repeats_first_frame() {
        let mut cfg = MaskConfig::new(5, 40, 40, 1);
        cfg.motion = MotionParams::STILL;
        let m = generate_mask_3d(&cfg, &mut seeded(4)).unwrap();
        for f in 1..5 {
            assert_eq!(m.frame(f), m.frame(0));
        }
    }

    #[test]
    fn independent_frames_differ() {
        let mut cfg = MaskConfig::new(4, 40, 40, 1);
        cfg.independent_frames = true;
        let m = generate_mask_3d(&cfg, &mut seeded(4)).unwrap();
        assert!((1..4).any(|f| m.frame(f) != m.frame(0)));
    }

    #[test]
    fn zero_shapes_rejected() {
        let cfg = MaskConfig::new(4, 40, 40, 0);
        assert!(matches!(
            generate_mask_3d(&cfg, &mut seeded(0)),
            Err(MaskError::InvalidParams(_))
        ));
    }
}
