//! Posed video inputs and the sparse 2D track table.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Sparse metric depth sample used to align relative depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRef {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub camera: Camera,
    /// Row-major RGB in `[0, 1]`.
    pub image: Vec<[f64; 3]>,
    /// Relative depth; nonpositive entries are missing.
    pub depth: Vec<f64>,
    /// Moving-object mask.
    pub mask: Vec<bool>,
    pub depth_refs: Vec<DepthRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.frames.iter().map(|f| f.camera).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 frames, got {}", self.frames.len())));
        }
        let n = self.width * self.height;
        for (t, f) in self.frames.iter().enumerate() {
            if f.image.len() != n || f.depth.len() != n || f.mask.len() != n {
                return Err(Error::ShapeMismatch(format!("frame {t} buffers do not match {}x{}", self.width, self.height)));
            }
            if f.camera.width != self.width || f.camera.height != self.height {
                return Err(Error::ShapeMismatch(format!("frame {t} camera size differs from the sequence")));
            }
        }
        Ok(())
    }
}

/// 2D tracks over `P` points and `T` frames, stored point-major (`p * T + t`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackTable {
    pub num_points: usize,
    pub num_frames: usize,
    pub uv: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub confidence: Vec<f64>,
    /// Lifted world positions; NaN where not lifted.
    pub xyz: Vec<[f64; 3]>,
}

impl TrackTable {
    pub fn new(num_points: usize, num_frames: usize) -> Self {
        let n = num_points * num_frames;
        Self {
            num_points,
            num_frames,
            uv: vec![[0.0; 2]; n],
            visible: vec![false; n],
            confidence: vec![0.0; n],
            xyz: vec![[f64::NAN; 3]; n],
        }
    }

    pub fn idx(&self, p: usize, t: usize) -> usize {
        p * self.num_frames + t
    }

    pub fn uv_at(&self, p: usize, t: usize) -> Vector2<f64> {
        let [u, v] = self.uv[self.idx(p, t)];
        Vector2::new(u, v)
    }

    pub fn is_visible(&self, p: usize, t: usize) -> bool {
        self.visible[self.idx(p, t)]
    }

    /// Visible and lifted.
    pub fn has_xyz(&self, p: usize, t: usize) -> bool {
        let i = self.idx(p, t);
        self.visible[i] && self.xyz[i][0].is_finite()
    }

    pub fn visible_count(&self, t: usize) -> usize {
        (0..self.num_points).filter(|&p| self.is_visible(p, t)).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_points * self.num_frames;
        if self.uv.len() != n || self.visible.len() != n || self.confidence.len() != n || self.xyz.len() != n {
            return Err(Error::ShapeMismatch(format!("track buffers do not match {}x{}", self.num_points, self.num_frames)));
        }
        if let Some(c) = self.confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidSpec(format!("track confidence {c} outside [0, 1]")));
        }
        Ok(())
    }
}
