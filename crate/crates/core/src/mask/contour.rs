//! Random closed contours: anchors on a perturbed circle, rescaled to a
//! proposal box, placed in the frame and joined by cubic Bézier segments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MaskError;
use crate::rng::uniform;

/// Resample cap for a degenerate (zero-extent) anchor bounding box.
pub const MAX_CONTOUR_ATTEMPTS: usize = 8;
const DEGENERATE_EXTENT: f64 = 1e-12;

/// Pixel-space point; `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourParams {
    /// Number of anchors `k`.
    pub num_vertices: usize,
    /// Radial perturbation ratio `ρ`; radii are drawn from `[1-ρ, 1+ρ]`.
    pub corruption_ratio: f64,
    /// Proposal box height in pixels.
    pub proposal_height: f64,
    /// Proposal box width in pixels.
    pub proposal_width: f64,
    /// Control-point offset along each chord, as a fraction of the chord.
    pub smoothness: f64,
}

impl ContourParams {
    pub fn validate(&self, frame_height: usize, frame_width: usize) -> Result<(), MaskError> {
        let bad = |msg: String| Err(MaskError::InvalidParams(msg));
        if self.num_vertices < 3 {
            return bad(format!("num_vertices must be >= 3, got {}", self.num_vertices));
        }
        if !(self.corruption_ratio > 0.0 && self.corruption_ratio < 1.0) {
            return bad(format!(
                "corruption_ratio must lie in (0, 1), got {}",
                self.corruption_ratio
            ));
        }
        if !(self.smoothness > 0.0 && self.smoothness < 1.0) {
            return bad(format!("smoothness must lie in (0, 1), got {}", self.smoothness));
        }
        if !(self.proposal_height > 0.0 && self.proposal_height <= frame_height as f64) {
            return bad(format!(
                "proposal_height must lie in (0, {frame_height}], got {}",
                self.proposal_height
            ));
        }
        if !(self.proposal_width > 0.0 && self.proposal_width <= frame_width as f64) {
            return bad(format!(
                "proposal_width must lie in (0, {frame_width}], got {}",
                self.proposal_width
            ));
        }
        Ok(())
    }
}

/// Closed chain of `k` cubic segments. Segment `j` runs from `anchors[j]`
/// through `control1[j]`, `control2[j]` to `anchors[(j + 1) % k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedContour {
    pub anchors: Vec<Point>,
    pub control1: Vec<Point>,
    pub control2: Vec<Point>,
}

impl ClosedContour {
    /// Control points placed along each chord at `smoothness` of its length
    /// from either end.
    pub fn from_anchors(anchors: Vec<Point>, smoothness: f64) -> Self {
        let k = anchors.len();
        let mut control1 = Vec::with_capacity(k);
        let mut control2 = Vec::with_capacity(k);
        for j in 0..k {
            let a = anchors[j];
            let b = anchors[(j + 1) % k];
            let d = Point::new(b.x - a.x, b.y - a.y);
            control1.push(Point::new(a.x + smoothness * d.x, a.y + smoothness * d.y));
            control2.push(Point::new(b.x - smoothness * d.x, b.y - smoothness * d.y));
        }
        Self {
            anchors,
            control1,
            control2,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.anchors.len()
    }

    pub fn segment(&self, j: usize) -> [Point; 4] {
        let k = self.anchors.len();
        [
            self.anchors[j],
            self.control1[j],
            self.control2[j],
            self.anchors[(j + 1) % k],
        ]
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.anchors.iter().chain(&self.control1).chain(&self.control2).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.points().all(Point::is_finite)
    }

    /// Bounding box of anchors and control points. The curve itself lies in
    /// the convex hull of these, so this box contains it.
    pub fn bbox(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.points() {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Mean of the anchors.
    pub fn centroid(&self) -> Point {
        let n = self.anchors.len() as f64;
        let (sx, sy) = self.anchors.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            anchors: self.anchors.iter().map(|&p| f(p)).collect(),
            control1: self.control1.iter().map(|&p| f(p)).collect(),
            control2: self.control2.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        self.map_points(|p| Point::new(p.x + dx, p.y + dy))
    }

    pub fn rotated_about(&self, center: Point, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        self.map_points(|p| {
            let (dx, dy) = (p.x - center.x, p.y - center.y);
            Point::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
        })
    }
}

/// Draw a closed contour inside a `frame_height × frame_width` frame.
///
/// Draw order: `k` radial offsets, then the row offset, then the column
/// offset. The whole draw is repeated if the anchors have a zero-extent
/// bounding box.
pub fn sample_contour(
    params: &ContourParams,
    frame_height: usize,
    frame_width: usize,
    rng: &mut impl Rng,
) -> Result<ClosedContour, MaskError> {
    params.validate(frame_height, frame_width)?;
    let k = params.num_vertices;
    let rho = params.corruption_ratio;
    let (h, w) = (params.proposal_height, params.proposal_width);

    for _ in 0..MAX_CONTOUR_ATTEMPTS {
        let mut anchors: Vec<Point> = (0..k)
            .map(|j| {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                let r = 1.0 - rho + 2.0 * rho * rng.random::<f64>();
                Point::new(r * phi.cos(), r * phi.sin())
            })
            .collect();

        let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for a in &anchors {
            x_min = x_min.min(a.x);
            x_max = x_max.max(a.x);
            y_min = y_min.min(a.y);
            y_max = y_max.max(a.y);
        }
        let (bbox_w, bbox_h) = (x_max - x_min, y_max - y_min);
        if !(bbox_w > DEGENERATE_EXTENT && bbox_h > DEGENERATE_EXTENT) {
            continue;
        }

        let row_offset = uniform(rng, 0.0, frame_height as f64 - h);
        let col_offset = uniform(rng, 0.0, frame_width as f64 - w);
        for a in &mut anchors {
            a.x = (a.x - x_min) / bbox_w * w + col_offset;
            a.y = (a.y - y_min) / bbox_h * h + row_offset;
        }
        return Ok(ClosedContour::from_anchors(anchors, params.smoothness));
    }
    Err(MaskError::DegenerateContour {
        attempts: MAX_CONTOUR_ATTEMPTS,
    })
}
