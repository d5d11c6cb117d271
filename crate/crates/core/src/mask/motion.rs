//! Temporal broadcast of a first-frame contour by random rigid motion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::contour::ClosedContour;
use super::MaskError;
use crate::rng::uniform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Radians; each frame adds a rotation drawn from `[-max, max]`.
    pub max_rotation_per_frame: f64,
    /// Pixels; each frame adds a translation drawn per axis from `[-max, max]`.
    pub max_translation_per_frame: f64,
}

impl MotionParams {
    pub const STILL: MotionParams = MotionParams {
        max_rotation_per_frame: 0.0,
        max_translation_per_frame: 0.0,
    };

    /// 0.05 rad and 2% of the shorter frame side per frame.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self {
            max_rotation_per_frame: 0.05,
            max_translation_per_frame: 0.02 * height.min(width) as f64,
        }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.max_rotation_per_frame) && ok(self.max_translation_per_frame) {
            Ok(())
        } else {
            Err(MaskError::InvalidParams(format!(
                "motion magnitudes must be finite and >= 0, got {self:?}"
            )))
        }
    }
}

/// Carry `contour` across `n_frames` frames. Frame 0 is the input; each later
/// frame rotates the previous one about its centroid, translates it, and then
/// shifts it back so its bounding box stays inside the `width × height` frame.
///
/// Draw order per frame: rotation, x translation, y translation. A rotation
/// whose result cannot fit in the frame at all is dropped for that frame.
pub fn broadcast_contour(
    contour: &ClosedContour,
    n_frames: usize,
    motion: &MotionParams,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ClosedContour>, MaskError> {
    if n_frames == 0 {
        return Err(MaskError::InvalidParams("n_frames must be >= 1".into()));
    }
    motion.validate()?;
    let (fh, fw) = (height as f64, width as f64);
    let mut frames = Vec::with_capacity(n_frames);
    frames.push(contour.clone());

    for _ in 1..n_frames {
        let rot = motion.max_rotation_per_frame;
        let trans = motion.max_translation_per_frame;
        let d_theta = uniform(rng, -rot, rot);
        let dx = uniform(rng, -trans, trans);
        let dy = uniform(rng, -trans, trans);

        let prev = frames.last().expect("non-empty");
        let mut next = if d_theta != 0.0 {
            let rotated = prev.rotated_about(prev.centroid(), d_theta);
            let (lo, hi) = rotated.bbox();
            if hi.x - lo.x <= fw && hi.y - lo.y <= fh {
                rotated
            } else {
                prev.clone()
            }
        } else {
            prev.clone()
        };
        if dx != 0.0 || dy != 0.0 {
            next = next.translated(dx, dy);
        }

        let (lo, hi) = next.bbox();
        let shift = |lo: f64, hi: f64, limit: f64| {
            if lo < 0.0 {
                -lo
            } else if hi > limit {
                limit - hi
            } else {
                0.0
            }
        };
        let (sx, sy) = (shift(lo.x, hi.x, fw), shift(lo.y, hi.y, fh));
        if sx != 0.0 || sy != 0.0 {
            next = next.translated(sx, sy);
        }
        frames.push(next);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::contour::{sample_contour, ContourParams};
    use crate::rng::seeded;

    fn contour(seed: u64) -> ClosedContour {
        let p = ContourParams {
            num_vertices: 6,
            corruption_ratio: 0.7,
            proposal_height: 24.0,
            proposal_width: 24.0,
            smoothness: 0.3,
        };
        sample_contour(&p, 64, 64, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn zero_motion_copies() {
        let c = contour(1);
        let frames = broadcast_contour(&c, 6, &MotionParams::STILL, 64, 64, &mut seeded(2)).unwrap();
        assert_eq!(frames.len(), 6);
        assert!(frames.iter().all(|f| *f == c));
    }

    #[test]
    fn single_frame_is_input() {
        let c = contour(3);
        let m = MotionParams::default_for(64, 64);
        let frames = broadcast_contour(&c, 1, &m, 64, 64, &mut seeded(4)).unwrap();
        assert_eq!(frames, vec![c]);
    }

    #[test]
    fn bounded_motion_stays_in_frame() {
        let m = MotionParams {
            max_rotation_per_frame: 0.1,
            max_translation_per_frame: 2.0,
        };
        for seed in 0..20 {
            let c = contour(seed);
            let frames = broadcast_contour(&c, 8, &m, 64, 64, &mut seeded(100 + seed)).unwrap();
            for f in &frames {
                let (lo, hi) = f.bbox();
                assert!(lo.x >= 0.0 && lo.y >= 0.0 && hi.x <= 64.0 && hi.y <= 64.0);
            }
            for w in frames.windows(2) {
                let (a, b) = (w[0].centroid(), w[1].centroid());
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                let (lo, hi) = w[1].bbox();
                let touching = lo.x <= 0.0 || lo.y <= 0.0 || hi.x >= 64.0 || hi.y >= 64.0;
                if !touching {
                    assert!(d <= 2.0 * 2f64.sqrt() + 1e-9, "displacement {d}");
                }
            }
        }
    }

    #[test]
    fn rotation_that_cannot_fit_is_dropped() {
        // a contour spanning the whole frame
        let p = ContourParams {
            num_vertices: 4,
            corruption_ratio: 0.5,
            proposal_height: 32.0,
            proposal_width: 32.0,
            smoothness: 0.3,
        };
        let c = sample_contour(&p, 32, 32, &mut seeded(5)).unwrap();
        let m = MotionParams {
            max_rotation_per_frame: 0.3,
            max_translation_per_frame: 0.0,
        };
        let frames = broadcast_contour(&c, 5, &m, 32, 32, &mut seeded(6)).unwrap();
        for f in &frames {
            let (lo, hi) = f.bbox();
            assert!(lo.x >= -1e-9 && lo.y >= -1e-9 && hi.x <= 32.0 + 1e-9 && hi.y <= 32.0 + 1e-9);
        }
    }

    #[test]
    fn rejects_negative_motion() {
        let m = MotionParams {
            max_rotation_per_frame: -0.1,
            max_translation_per_frame: 0.0,
        };
        assert!(broadcast_contour(&contour(0), 3, &m, 64, 64, &mut seeded(0)).is_err());
    }
}
