//! Spatio-temporal corruption masks.
//!
//! A mask is built from `P` closed Bézier contours sampled in the first frame
//! ([`contour`]), carried across frames by small random rigid motions
//! ([`motion`]), rasterized per frame ([`raster`]) and OR-ed together
//! ([`generate`]). [`SpatioTemporalMask::downsample`] max-pools the
//! pixel-space result to latent resolution.

pub mod contour;
pub mod generate;
pub mod motion;
pub mod raster;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contour::{sample_contour, ClosedContour, ContourParams, Point};
pub use generate::{generate_mask_3d, generate_shape_tracks, rasterize_tracks, ContourRanges, MaskConfig};
pub use motion::{broadcast_contour, MotionParams};
pub use raster::{rasterize_contour, BinaryFrame, RasterOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("contour bounding box degenerate after {attempts} attempts")]
    DegenerateContour { attempts: usize },
    #[error("mask empty after {attempts} full redraws")]
    EmptyMask { attempts: usize },
    #[error("{dim} size {size} is not divisible by factor {factor} and padding is disabled")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        factor: usize,
    },
    #[error("mask value {value} at index {index} is not binary")]
    NonBinary { index: usize, value: u8 },
    #[error("mask data length {got} does not match dims {dims:?}")]
    DataLength { dims: [usize; 3], got: usize },
    #[error("mask is already at latent resolution")]
    AlreadyLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskResolution {
    Pixel,
    Latent,
}

impl MaskResolution {
    pub fn tag(self) -> u8 {
        match self {
            MaskResolution::Pixel => 0,
            MaskResolution::Latent => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(MaskResolution::Pixel),
            1 => Some(MaskResolution::Latent),
            _ => None,
        }
    }
}

/// Binary occupancy grid over `(frames, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatioTemporalMask {
    dims: [usize; 3],
    resolution: MaskResolution,
    data: Vec<u8>,
}

impl SpatioTemporalMask {
    pub fn new(dims: [usize; 3], resolution: MaskResolution, data: Vec<u8>) -> Result<Self, MaskError> {
        if dims.contains(&0) {
            return Err(MaskError::InvalidParams(format!(
                "mask dims must be positive, got {dims:?}"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(MaskError::DataLength { dims, got: data.len() });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(MaskError::NonBinary {
                index,
                value: data[index],
            });
        }
        Ok(Self { dims, resolution, data })
    }

    pub fn zeros(dims: [usize; 3], resolution: MaskResolution) -> Self {
        Self::filled(dims, resolution, 0)
    }

    pub fn ones(dims: [usize; 3], resolution: MaskResolution) -> Self {
        Self::filled(dims, resolution, 1)
    }

    fn filled(dims: [usize; 3], resolution: MaskResolution, v: u8) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero-sized mask {dims:?}");
        Self {
            dims,
            resolution,
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn resolution(&self) -> MaskResolution {
        self.resolution
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, f: usize, r: usize, c: usize) -> usize {
        (f * self.dims[1] + r) * self.dims[2] + c
    }

    pub fn get(&self, f: usize, r: usize, c: usize) -> bool {
        self.data[self.index(f, r, c)] == 1
    }

    pub fn set(&mut self, f: usize, r: usize, c: usize, v: bool) {
        let i = self.index(f, r, c);
        self.data[i] = v as u8;
    }

    /// `‖M‖₁`.
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.dims[1] * self.dims[2];
        &self.data[f * n..(f + 1) * n]
    }

    pub(crate) fn or_frame(&mut self, f: usize, frame: &BinaryFrame) {
        debug_assert_eq!(frame.height, self.dims[1]);
        debug_assert_eq!(frame.width, self.dims[2]);
        let n = self.dims[1] * self.dims[2];
        for (dst, &src) in self.data[f * n..(f + 1) * n].iter_mut().zip(&frame.data) {
            *dst |= src;
        }
    }

    /// Max-pool a pixel-space mask by `t_factor` in time and `s_factor` in
    /// both spatial axes. With `pad`, non-divisible dims are zero-padded at
    /// the high end; without it they are an error.
    pub fn downsample(&self, t_factor: usize, s_factor: usize, pad: bool) -> Result<SpatioTemporalMask, MaskError> {
        if self.resolution == MaskResolution::Latent {
            return Err(MaskError::AlreadyLatent);
        }
        if t_factor == 0 || s_factor == 0 {
            return Err(MaskError::InvalidParams("downsample factors must be >= 1".into()));
        }
        let [t, h, w] = self.dims;
        let out_dim = |dim: &'static str, size: usize, factor: usize| {
            if size.is_multiple_of(factor) {
                Ok(size / factor)
            } else if pad {
                Ok(size.div_ceil(factor))
            } else {
                Err(MaskError::NotDivisible { dim, size, factor })
            }
        };
        let ot = out_dim("frames", t, t_factor)?;
        let oh = out_dim("height", h, s_factor)?;
        let ow = out_dim("width", w, s_factor)?;

        let mut out = SpatioTemporalMask::zeros([ot, oh, ow], MaskResolution::Latent);
        for f in 0..t {
            for r in 0..h {
                let row = &self.data[self.index(f, r, 0)..self.index(f, r, 0) + w];
                for (c, &v) in row.iter().enumerate() {
                    if v == 1 {
                        let i = out.index(f / t_factor, r / s_factor, c / s_factor);
                        out.data[i] = 1;
                    }
                }
            }
        }
        Ok(out)
    }
}
