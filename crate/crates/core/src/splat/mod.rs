//! Gaussian scene representation and the differentiable CPU rasterizer.

mod export;
mod raster;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, Camera, RigidTransform, ZNEAR};
use crate::grad::{sigmoid, Tensor};

pub use export::{
    encode_depth, quantize8, read_depth_png16, read_gray8_png, read_ply, read_png, read_rgb_png, write_depth_png16,
    write_depth_with_sidecar, write_gray8_png, write_ply, write_rgb_png, DepthScale, RawImage,
};
pub use raster::{
    composite, pixel_grid, project_all, project_gaussians, project_row, rasterize, rasterize_at, unpack_row, Contribution, Prepared, ALPHA_MAX,
    COV_FLOOR, FOOTPRINT_Q, MIN_TRANSMITTANCE, PROJ_COLS,
};

/// Alpha at or above which a rendered correspondence counts as valid.
pub const VALID_ALPHA: f64 = 0.5;

/// Canonical Gaussians. Rows of every tensor index the same Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    /// N×3 canonical means.
    pub means: Tensor,
    /// N×4 orientations `(w, x, y, z)`.
    pub quats: Tensor,
    pub log_scales: Tensor,
    /// N×1, squashed by a sigmoid.
    pub opacity_logits: Tensor,
    pub colors: Tensor,
    pub dynamic: Vec<bool>,
}

impl Default for GaussianSet {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianSet {
    pub fn new() -> Self {
        Self {
            means: Tensor::zeros(0, 3),
            quats: Tensor::zeros(0, 4),
            log_scales: Tensor::zeros(0, 3),
            opacity_logits: Tensor::zeros(0, 1),
            colors: Tensor::zeros(0, 3),
            dynamic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dynamic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dynamic.is_empty()
    }

    /// Appends a Gaussian given its actual (not log/logit) scale and opacity.
    pub fn push(&mut self, mean: Vector3<f64>, quat: [f64; 4], scale: Vector3<f64>, opacity: f64, color: [f64; 3], dynamic: bool) {
        self.means.push_row(mean.as_slice());
        self.quats.push_row(&quat);
        self.log_scales.push_row(&[scale.x.ln(), scale.y.ln(), scale.z.ln()]);
        self.opacity_logits.push_row(&[logit(opacity)]);
        self.colors.push_row(&color);
        self.dynamic.push(dynamic);
    }

    pub fn mean(&self, i: usize) -> Vector3<f64> {
        let r = self.means.row(i);
        Vector3::new(r[0], r[1], r[2])
    }

    pub fn rotation(&self, i: usize) -> Matrix3<f64> {
        let q = self.quats.row(i);
        quat_to_matrix([q[0], q[1], q[2], q[3]])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        let r = self.log_scales.row(i);
        Vector3::new(r[0].exp(), r[1].exp(), r[2].exp())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits.get(i, 0))
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        let r = self.colors.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn opacities(&self) -> Tensor {
        Tensor::column((0..self.len()).map(|i| self.opacity(i)).collect())
    }

    pub fn scales(&self) -> Tensor {
        Tensor::from_vec(self.len(), 3, self.log_scales.data().iter().map(|v| v.exp()).collect())
    }

    pub fn num_dynamic(&self) -> usize {
        self.dynamic.iter().filter(|&&d| d).count()
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.dynamic[i]).collect()
    }

    pub fn select(&self, keep: &[bool]) -> GaussianSet {
        GaussianSet {
            means: self.means.select_rows(keep),
            quats: self.quats.select_rows(keep),
            log_scales: self.log_scales.select_rows(keep),
            opacity_logits: self.opacity_logits.select_rows(keep),
            colors: self.colors.select_rows(keep),
            dynamic: self.dynamic.iter().zip(keep).filter(|(_, &k)| k).map(|(&d, _)| d).collect(),
        }
    }

    pub fn take(&self, idx: &[usize]) -> GaussianSet {
        GaussianSet {
            means: self.means.take_rows(idx),
            quats: self.quats.take_rows(idx),
            log_scales: self.log_scales.take_rows(idx),
            opacity_logits: self.opacity_logits.take_rows(idx),
            colors: self.colors.take_rows(idx),
            dynamic: idx.iter().map(|&i| self.dynamic[i]).collect(),
        }
    }

    pub fn concat(&self, other: &GaussianSet) -> GaussianSet {
        GaussianSet {
            means: Tensor::vstack(&[&self.means, &other.means]),
            quats: Tensor::vstack(&[&self.quats, &other.quats]),
            log_scales: Tensor::vstack(&[&self.log_scales, &other.log_scales]),
            opacity_logits: Tensor::vstack(&[&self.opacity_logits, &other.opacity_logits]),
            colors: Tensor::vstack(&[&self.colors, &other.colors]),
            dynamic: self.dynamic.iter().chain(&other.dynamic).copied().collect(),
        }
    }

    /// Means (N×3) and row-major rotations (N×9) after applying one pose per Gaussian.
    pub fn posed(&self, poses: &[RigidTransform]) -> Result<(Tensor, Tensor)> {
        if poses.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("{} poses for {} Gaussians", poses.len(), self.len())));
        }
        let mut means = Tensor::zeros(self.len(), 3);
        let mut rots = Tensor::zeros(self.len(), 9);
        for (i, pose) in poses.iter().enumerate() {
            means.row_mut(i).copy_from_slice(pose.apply(&self.mean(i)).as_slice());
            let r = pose.rotation * self.rotation(i);
            for a in 0..3 {
                for b in 0..3 {
                    rots.set(i, a * 3 + b, r[(a, b)]);
                }
            }
        }
        Ok((means, rots))
    }

    /// Copy with means and orientations moved by the per-Gaussian poses.
    pub fn transformed(&self, poses: &[RigidTransform]) -> Result<GaussianSet> {
        let (means, rots) = self.posed(poses)?;
        let mut out = self.clone();
        out.means = means;
        for i in 0..self.len() {
            let r = Matrix3::from_row_slice(rots.row(i));
            out.quats.row_mut(i).copy_from_slice(&crate::geometry::matrix_to_quat(&r));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let shapes = [
            ("means", self.means.shape(), 3),
            ("quats", self.quats.shape(), 4),
            ("log_scales", self.log_scales.shape(), 3),
            ("opacity_logits", self.opacity_logits.shape(), 1),
            ("colors", self.colors.shape(), 3),
        ];
        for (name, shape, cols) in shapes {
            if shape != (n, cols) {
                return Err(Error::ShapeMismatch(format!("{name} is {}x{}, expected {n}x{cols}", shape.0, shape.1)));
            }
        }
        Ok(())
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Projects one Gaussian to its 2D mean, floored 2D covariance and camera depth.
pub fn project_gaussian(cam: &Camera, mu: &Vector3<f64>, rot: &Matrix3<f64>, scale: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2<f64>, f64)> {
    match project_row(cam, mu, rot, scale) {
        Some(row) => Ok(unpack_row(&row)),
        None => Err(Error::BehindCamera { z: cam.extrinsics.apply(mu).z }),
    }
}

/// Rendered frame on the pixel grid, row-major.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub image: Vec<[f64; 3]>,
    /// Composited camera depth, not normalized by alpha.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-normalized world position of the visible surface.
    pub track_world: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl RenderOutput {
    /// Depth divided by alpha where valid, 0 elsewhere.
    pub fn expected_depth(&self) -> Vec<f64> {
        self.depth.iter().zip(&self.alpha).map(|(&d, &a)| if a >= VALID_ALPHA { d / a } else { 0.0 }).collect()
    }
}

fn split_rows(out: &Tensor, c: usize) -> Vec<[f64; 3]> {
    (0..out.rows()).map(|r| [out.get(r, c), out.get(r, c + 1), out.get(r, c + 2)]).collect()
}

fn normalized(xyz: Vec<[f64; 3]>, alpha: &[f64]) -> (Vec<[f64; 3]>, Vec<bool>) {
    let valid: Vec<bool> = alpha.iter().map(|&a| a >= VALID_ALPHA).collect();
    let xyz = xyz
        .into_iter()
        .zip(alpha)
        .zip(&valid)
        .map(|((p, &a), &v)| if v { p.map(|x| x / a) } else { [0.0; 3] })
        .collect();
    (xyz, valid)
}

/// Renders image, depth, alpha and the current-time position map.
pub fn rasterize_frame(gs: &GaussianSet, poses: &[RigidTransform], cam: &Camera) -> Result<RenderOutput> {
    let (means, rots) = gs.posed(poses)?;
    let proj = project_all(cam, &means, &rots, &gs.scales());
    let mut payload = Tensor::zeros(gs.len(), 7);
    for i in 0..gs.len() {
        let c = gs.color(i);
        let m = means.row(i);
        payload.row_mut(i).copy_from_slice(&[c[0], c[1], c[2], proj.get(i, 5), m[0], m[1], m[2]]);
    }
    let samples = pixel_grid(cam.width, cam.height);
    let out = composite(&proj, &gs.opacities(), &payload, &samples);
    let alpha: Vec<f64> = (0..out.rows()).map(|r| out.get(r, 7)).collect();
    let (track_world, valid) = normalized(split_rows(&out, 4), &alpha);
    Ok(RenderOutput {
        width: cam.width,
        height: cam.height,
        image: split_rows(&out, 0),
        depth: (0..out.rows()).map(|r| out.get(r, 3)).collect(),
        alpha,
        track_world,
        valid,
    })
}

/// Expected target-time world positions at a set of sample points.
#[derive(Clone, Debug)]
pub struct TrackMap {
    pub xyz: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Composites dynamic Gaussians' target-time means with query-time weights at `samples`.
pub fn rasterize_tracks_at(
    gs: &GaussianSet,
    poses_t: &[RigidTransform],
    poses_target: &[RigidTransform],
    cam_t: &Camera,
    samples: &[[f64; 2]],
) -> Result<TrackMap> {
    if poses_target.len() != gs.len() {
        return Err(Error::ShapeMismatch(format!("{} target poses for {} Gaussians", poses_target.len(), gs.len())));
    }
    let (means, rots) = gs.posed(poses_t)?;
    let mut proj = project_all(cam_t, &means, &rots, &gs.scales());
    let mut payload = Tensor::zeros(gs.len(), 3);
    for i in 0..gs.len() {
        if gs.dynamic[i] {
            payload.row_mut(i).copy_from_slice(poses_target[i].apply(&gs.mean(i)).as_slice());
        } else {
            proj.set(i, 5, -1.0);
        }
    }
    let out = composite(&proj, &gs.opacities(), &payload, samples);
    let alpha: Vec<f64> = (0..out.rows()).map(|r| out.get(r, 3)).collect();
    let (xyz, valid) = normalized(split_rows(&out, 0), &alpha);
    Ok(TrackMap { xyz, alpha, valid })
}

/// [`rasterize_tracks_at`] over the full pixel grid of `cam_t`.
pub fn rasterize_tracks(gs: &GaussianSet, poses_t: &[RigidTransform], poses_target: &[RigidTransform], cam_t: &Camera) -> Result<TrackMap> {
    rasterize_tracks_at(gs, poses_t, poses_target, cam_t, &pixel_grid(cam_t.width, cam_t.height))
}

/// Target-frame pixel positions and depths of a track map.
#[derive(Clone, Debug)]
pub struct Correspondences {
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn project_track_map(track: &TrackMap, cam_target: &Camera) -> Correspondences {
    let n = track.xyz.len();
    let mut out = Correspondences { uv: vec![[0.0; 2]; n], depth: vec![0.0; n], valid: vec![false; n] };
    for (k, p) in track.xyz.iter().enumerate() {
        if !track.valid[k] {
            continue;
        }
        let xc = cam_target.extrinsics.apply(&Vector3::from(*p));
        if !(xc.z > ZNEAR) {
            continue;
        }
        let px = cam_target.pixel_from_camera(&xc);
        out.uv[k] = [px.x, px.y];
        out.depth[k] = xc.z;
        out.valid[k] = true;
    }
    out
}
