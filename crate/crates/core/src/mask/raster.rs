//! Contour rasterization: flatten every cubic segment into a fixed number of
//! line segments, fill by the even-odd rule at pixel centers, then mark
//! pixels whose center lies on the flattened outline.

use serde::{Deserialize, Serialize};

use super::contour::{ClosedContour, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterOptions {
    /// Line segments per cubic segment.
    pub samples_per_segment: usize,
    /// A pixel whose center is closer than this (in pixels) to the flattened
    /// outline counts as lying on the contour and is set.
    pub boundary_tolerance: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            samples_per_segment: 32,
            boundary_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

fn cubic(p: &[Point; 4], u: f64) -> Point {
    let v = 1.0 - u;
    let (b0, b1, b2, b3) = (v * v * v, 3.0 * v * v * u, 3.0 * v * u * u, u * u * u);
    Point::new(
        b0 * p[0].x + b1 * p[1].x + b2 * p[2].x + b3 * p[3].x,
        b0 * p[0].y + b1 * p[1].y + b2 * p[2].y + b3 * p[3].y,
    )
}

/// Flattened closed polygon: `samples_per_segment` vertices per segment,
/// starting at each segment's first anchor. The closing edge is implicit.
pub fn flatten(contour: &ClosedContour, samples_per_segment: usize) -> Vec<Point> {
    let s = samples_per_segment.max(1);
    let mut out = Vec::with_capacity(contour.num_segments() * s);
    for j in 0..contour.num_segments() {
        let seg = contour.segment(j);
        out.push(seg[0]);
        for i in 1..s {
            out.push(cubic(&seg, i as f64 / s as f64));
        }
    }
    out
}

/// Distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.x + u * dx, a.y + u * dy);
    ((p.x - qx).powi(2) + (p.y - qy).powi(2)).sqrt()
}

/// Rasterize a closed polygon onto an `height × width` grid.
pub fn rasterize_polygon(poly: &[Point], height: usize, width: usize, boundary_tolerance: f64) -> BinaryFrame {
    let mut frame = BinaryFrame::zeros(height, width);
    let n = poly.len();
    if n < 2 {
        return frame;
    }

    let mut crossings = Vec::new();
    for r in 0..height {
        let y = r as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            if (p.y <= y) != (q.y <= y) {
                crossings.push(p.x + (y - p.y) * (q.x - p.x) / (q.y - p.y));
            }
        }
        crossings.sort_by(f64::total_cmp);
        // center x is inside iff an odd number of crossings lie strictly left
        // of it: x in (left, right] for consecutive pairs.
        for pair in crossings.chunks_exact(2) {
            let first = (pair[0] - 0.5).floor() + 1.0;
            let last = (pair[1] - 0.5).floor();
            let lo = first.max(0.0);
            let hi = last.min(width as f64 - 1.0);
            if lo > hi {
                continue;
            }
            let row = &mut frame.data[r * width..(r + 1) * width];
            row[lo as usize..=hi as usize].fill(1);
        }
    }

    if boundary_tolerance > 0.0 {
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let c0 = ((a.x.min(b.x) - boundary_tolerance - 0.5).floor().max(0.0)) as usize;
            let c1 = (a.x.max(b.x) + boundary_tolerance - 0.5).ceil();
            let r0 = ((a.y.min(b.y) - boundary_tolerance - 0.5).floor().max(0.0)) as usize;
            let r1 = (a.y.max(b.y) + boundary_tolerance - 0.5).ceil();
            if c1 < 0.0 || r1 < 0.0 {
                continue;
            }
            let c1 = (c1 as usize).min(width.saturating_sub(1));
            let r1 = (r1 as usize).min(height.saturating_sub(1));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let center = Point::new(c as f64 + 0.5, r as f64 + 0.5);
                    if point_segment_distance(center, a, b) < boundary_tolerance {
                        frame.data[r * width + c] = 1;
                    }
                }
            }
        }
    }
    frame
}

pub fn rasterize_contour(contour: &ClosedContour, height: usize, width: usize, opts: &RasterOptions) -> BinaryFrame {
    let poly = flatten(contour, opts.samples_per_segment);
    rasterize_polygon(&poly, height, width, opts.boundary_tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(lo: f64, hi: f64) -> ClosedContour {
        let anchors = vec![
            Point::new(lo, lo),
            Point::new(hi, lo),
            Point::new(hi, hi),
            Point::new(lo, hi),
        ];
        ClosedContour::from_anchors(anchors, 1.0 / 3.0)
    }

    #[test]
    fn square_fills_sixteen_pixels() {
        let opts = RasterOptions::default();
        // edges between pixel centers
        let f = rasterize_contour(&square(2.0, 6.0), 8, 8, &opts);
        assert_eq!(f.count_ones(), 16);
        // edges through pixel centers: on-contour pixels count
        let f = rasterize_contour(&square(2.5, 5.5), 8, 8, &opts);
        assert_eq!(f.count_ones(), 16);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(f.get(r, c), (2..=5).contains(&r) && (2..=5).contains(&c));
            }
        }
    }

    #[test]
    fn circle_area() {
        // four-arc Bézier circle of radius 10 centered at (32, 32)
        let kappa = 0.552_284_749_830_793_4 * 10.0;
        let (cx, cy, r) = (32.0, 32.0, 10.0);
        let anchors = vec![
            Point::new(cx + r, cy),
            Point::new(cx, cy + r),
            Point::new(cx - r, cy),
            Point::new(cx, cy - r),
        ];
        let control1 = vec![
            Point::new(cx + r, cy + kappa),
            Point::new(cx - kappa, cy + r),
            Point::new(cx - r, cy - kappa),
            Point::new(cx + kappa, cy - r),
        ];
        let control2 = vec![
            Point::new(cx + kappa, cy + r),
            Point::new(cx - r, cy + kappa),
            Point::new(cx - kappa, cy - r),
            Point::new(cx + r, cy - kappa),
        ];
        let c = ClosedContour {
            anchors,
            control1,
            control2,
        };
        let f = rasterize_contour(&c, 64, 64, &RasterOptions::default());
        let area = std::f64::consts::PI * 100.0;
        let rel = (f.count_ones() as f64 - area).abs() / area;
        assert!(rel < 0.05, "count {} vs {area}", f.count_ones());
    }

    #[test]
    fn flatten_vertex_count() {
        let poly = flatten(&square(1.0, 4.0), 32);
        assert_eq!(poly.len(), 4 * 32);
        assert_eq!(poly[0], Point::new(1.0, 1.0));
        assert_eq!(poly[32], Point::new(4.0, 1.0));
    }

    #[test]
    fn half_pixel_band_widens_fill() {
        let opts = RasterOptions {
            boundary_tolerance: 0.75,
            ..RasterOptions::default()
        };
        let f = rasterize_contour(&square(2.0, 6.0), 8, 8, &opts);
        assert_eq!(f.count_ones(), 36);
    }

    #[test]
    fn outside_frame_is_clipped() {
        let f = rasterize_contour(&square(-3.0, 3.0), 8, 8, &RasterOptions::default());
        assert_eq!(f.count_ones(), 9);
    }
}
