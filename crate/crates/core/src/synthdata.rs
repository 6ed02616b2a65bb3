//! Synthetic multi-object scenes with known motion, depth, tracks and renders.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, look_at, Camera, RigidTransform};
use crate::sequence::{DepthRef, Frame, Sequence, TrackTable};
use crate::splat::{rasterize_frame, rasterize_tracks_at, GaussianSet, VALID_ALPHA};

/// Relative margin beyond the rendered surface at which a point counts as hidden.
pub const OCCLUSION_MARGIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CameraPath {
    Static,
    /// Slides by `travel` over the sequence without turning.
    Linear { travel: [f64; 3] },
    /// Swings around the scene center about the vertical axis.
    Orbit { degrees: f64 },
}

/// Per-frame rigid motion of one object about its own center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClusterMotion {
    ConstantVelocity { velocity: [f64; 3], angular_velocity: [f64; 3] },
    Sinusoid { amplitude: [f64; 3], period: f64 },
    Spin { axis: [f64; 3], rate: f64, velocity: [f64; 3] },
}

impl ClusterMotion {
    /// Transform from the frame-0 pose to frame `t` for an object centered at `center`.
    pub fn at(&self, center: &Vector3<f64>, t: usize) -> RigidTransform {
        let tf = t as f64;
        let (rot, disp) = match self {
            ClusterMotion::ConstantVelocity { velocity, angular_velocity } => {
                let w = Vector3::from(*angular_velocity);
                (axis_angle(w, w.norm() * tf), Vector3::from(*velocity) * tf)
            }
            ClusterMotion::Sinusoid { amplitude, period } => {
                (nalgebra::Matrix3::identity(), Vector3::from(*amplitude) * (std::f64::consts::TAU * tf / period).sin())
            }
            ClusterMotion::Spin { axis, rate, velocity } => (axis_angle(Vector3::from(*axis), rate * tf), Vector3::from(*velocity) * tf),
        };
        RigidTransform::new(rot, center + disp - rot * center)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Multiplicative per-pixel depth noise.
    pub depth_sigma: f64,
    /// Per-coordinate track noise in pixels.
    pub track_sigma: f64,
    pub dropout: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { depth_sigma: 0.02, track_sigma: 1.0, dropout: 0.0 }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self { depth_sigma: 0.0, track_sigma: 0.0, dropout: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_clusters: usize,
    /// Observed tracks per object.
    pub points_per_cluster: usize,
    /// Held-out evaluation trajectories per object.
    pub eval_points_per_cluster: usize,
    pub gaussians_per_cluster: usize,
    /// Static backdrop Gaussians; 0 disables the backdrop.
    pub background_gaussians: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; defaults to framing all objects.
    pub focal: Option<f64>,
    pub camera_path: CameraPath,
    /// One per object; empty picks a default mix.
    pub motions: Vec<ClusterMotion>,
    pub noise: NoiseSpec,
    pub card_size: f64,
    /// Gaussian standard deviation as a fraction of the card's grid spacing.
    pub splat_footprint: f64,
    pub splat_opacity: f64,
    pub cluster_spacing: f64,
    /// Depth offset between neighboring objects.
    pub depth_stagger: f64,
    /// Distance from the first camera to the objects.
    pub scene_depth: f64,
    pub novel_views: usize,
    /// Held-out trajectories follow the rendered expected surface point at each query pixel
    /// instead of the sampled card point, so the generator's own scene reproduces them exactly.
    pub eval_from_render: bool,
    pub depth_refs_per_frame: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_clusters: 2,
            points_per_cluster: 64,
            eval_points_per_cluster: 32,
            gaussians_per_cluster: 150,
            background_gaussians: 200,
            num_frames: 24,
            width: 64,
            height: 64,
            focal: None,
            camera_path: CameraPath::Linear { travel: [0.4, 0.0, 0.0] },
            motions: Vec::new(),
            noise: NoiseSpec::default(),
            card_size: 0.6,
            splat_footprint: 0.7,
            splat_opacity: 0.95,
            cluster_spacing: 1.0,
            depth_stagger: 0.3,
            scene_depth: 4.0,
            novel_views: 4,
            eval_from_render: true,
            depth_refs_per_frame: 64,
            seed: 0,
        }
    }
}

fn default_motion(k: usize, num_frames: usize) -> ClusterMotion {
    match k % 3 {
        0 => ClusterMotion::Sinusoid { amplitude: [0.3, 0.1, 0.0], period: num_frames as f64 / 2.0 },
        1 => ClusterMotion::Spin { axis: [0.0, 0.0, 1.0], rate: 0.06, velocity: [0.01, -0.008, 0.01] },
        _ => ClusterMotion::ConstantVelocity { velocity: [-0.012, 0.01, 0.0], angular_velocity: [0.0; 3] },
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1".into());
        }
        if self.num_frames < 2 {
            return bad(format!("num_frames must be at least 2, got {}", self.num_frames));
        }
        if self.width < 4 || self.height < 4 {
            return bad(format!("image must be at least 4x4, got {}x{}", self.width, self.height));
        }
        if self.points_per_cluster == 0 || self.gaussians_per_cluster < 4 {
            return bad("need at least 1 track and 4 Gaussians per cluster".into());
        }
        if !(self.noise.depth_sigma >= 0.0 && self.noise.track_sigma >= 0.0) {
            return bad("noise sigmas must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.noise.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.noise.dropout));
        }
        if !self.motions.is_empty() && self.motions.len() != self.n_clusters {
            return bad(format!("{} motions for {} clusters", self.motions.len(), self.n_clusters));
        }
        if !(self.card_size > 0.0 && self.cluster_spacing > 0.0 && self.scene_depth > 0.0) {
            return bad("card_size, cluster_spacing and scene_depth must be positive".into());
        }
        if !(self.splat_footprint > 0.0 && self.splat_opacity > 0.0 && self.splat_opacity < 1.0) {
            return bad("splat_footprint must be positive and splat_opacity in (0, 1)".into());
        }
        if let Some(f) = self.focal {
            if !(f > 0.0) {
                return bad(format!("focal must be positive, got {f}"));
            }
        }
        for m in &self.motions {
            if let ClusterMotion::Sinusoid { period, .. } = m {
                if !(*period > 0.0) {
                    return bad("sinusoid period must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn motion(&self, k: usize) -> ClusterMotion {
        self.motions.get(k).cloned().unwrap_or_else(|| default_motion(k, self.num_frames))
    }

    pub fn center(&self, k: usize) -> Vector3<f64> {
        let offset = k as f64 - (self.n_clusters as f64 - 1.0) / 2.0;
        Vector3::new(offset * self.cluster_spacing, 0.0, self.scene_depth + offset * self.depth_stagger)
    }

    pub fn focal_length(&self) -> f64 {
        self.focal.unwrap_or_else(|| {
            let half_extent = 0.5 * ((self.n_clusters as f64 - 1.0) * self.cluster_spacing + self.card_size) + 0.5;
            0.5 * self.width.min(self.height) as f64 * self.scene_depth / half_extent
        })
    }

    pub fn camera(&self, t: usize) -> Result<Camera> {
        let s = if self.num_frames > 1 { t as f64 / (self.num_frames - 1) as f64 - 0.5 } else { 0.0 };
        let scene_center = Vector3::new(0.0, 0.0, self.scene_depth);
        let extrinsics = match &self.camera_path {
            CameraPath::Static => RigidTransform::identity(),
            CameraPath::Linear { travel } => RigidTransform::from_translation(-Vector3::from(*travel) * s),
            CameraPath::Orbit { degrees } => {
                let r = axis_angle(Vector3::y(), (degrees * s).to_radians());
                let eye = scene_center + r * Vector3::new(0.0, 0.0, -self.scene_depth);
                look_at(eye, scene_center, Vector3::new(0.0, -1.0, 0.0))
            }
        };
        let (w, h) = (self.width as f64, self.height as f64);
        Camera::simple(self.focal_length(), (w - 1.0) / 2.0, (h - 1.0) / 2.0, extrinsics, self.width, self.height)
    }
}

/// A camera off the input trajectory with its clean render.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NovelView {
    pub frame: usize,
    pub camera: Camera,
    #[serde(skip)]
    pub image: Vec<[f64; 3]>,
}

/// Everything the generator knows. Tracks are point-major `P×T`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub num_frames: usize,
    pub xyz_gt: Vec<[f64; 3]>,
    pub cluster_gt: Vec<usize>,
    pub cams: Vec<Camera>,
    /// Frame-0 to frame-`t` transform of each object, `K×T`.
    pub cluster_motion: Vec<Vec<RigidTransform>>,
    /// Per-frame `(scale, shift)` with metric = scale · relative + shift.
    pub depth_affine: Vec<[f64; 2]>,
    pub gaussians: GaussianSet,
    /// Object index per true Gaussian; `None` for the backdrop.
    pub gaussian_labels: Vec<Option<usize>>,
    pub eval_xyz: Vec<[f64; 3]>,
    pub eval_uv: Vec<[f64; 2]>,
    pub eval_occluded: Vec<bool>,
    pub eval_labels: Vec<usize>,
    pub eval_query: Vec<usize>,
    pub novel_views: Vec<NovelView>,
    /// Diagonal of the box bounding every evaluation trajectory.
    pub bbox_diagonal: f64,
    #[serde(skip)]
    pub images: Vec<Vec<[f64; 3]>>,
    /// Metric alpha-normalized depth, 0 where no surface.
    #[serde(skip)]
    pub depths: Vec<Vec<f64>>,
    #[serde(skip)]
    pub masks: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn num_eval_points(&self) -> usize {
        self.eval_labels.len()
    }

    /// Per-Gaussian poses at frame `t`.
    pub fn poses_at(&self, t: usize) -> Vec<RigidTransform> {
        self.gaussian_labels.iter().map(|l| l.map_or(RigidTransform::identity(), |k| self.cluster_motion[k][t])).collect()
    }
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub sequence: Sequence,
    pub tracks: TrackTable,
    pub truth: GroundTruth,
}

fn hue(k: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [[0.85, 0.25, 0.2], [0.2, 0.45, 0.85], [0.25, 0.75, 0.3], [0.85, 0.7, 0.15], [0.6, 0.3, 0.75], [0.2, 0.75, 0.75]];
    PALETTE[k % PALETTE.len()]
}

/// Flat square of Gaussians facing the camera, on a jittered grid.
fn card(gs: &mut GaussianSet, rng: &mut ChaCha8Rng, spec: &SceneSpec, center: Vector3<f64>, size: f64, count: usize, base: [f64; 3], dynamic: bool) {
    let m = (count as f64).sqrt().ceil() as usize;
    let spacing = size / (m.max(2) - 1) as f64;
    let mut placed = 0;
    'grid: for i in 0..m {
        for j in 0..m {
            if placed == count {
                break 'grid;
            }
            let u = -0.5 + i as f64 / (m.max(2) - 1) as f64 + rng.random_range(-0.1..0.1) / m as f64;
            let v = -0.5 + j as f64 / (m.max(2) - 1) as f64 + rng.random_range(-0.1..0.1) / m as f64;
            let texture = 0.75 + 0.25 * (std::f64::consts::TAU * 2.0 * u).sin() * (std::f64::consts::TAU * 2.0 * v).cos();
            let color = base.map(|c| (c * texture).clamp(0.02, 0.98));
            let mean = center + Vector3::new(u * size, v * size, 0.0);
            let scale = Vector3::new(spec.splat_footprint * spacing, spec.splat_footprint * spacing, 0.01 * spacing);
            gs.push(mean, [1.0, 0.0, 0.0, 0.0], scale, spec.splat_opacity, color, dynamic);
            placed += 1;
        }
    }
}

fn sample_card_points(rng: &mut ChaCha8Rng, center: Vector3<f64>, size: f64, n: usize) -> Vec<Vector3<f64>> {
    // Interior only, so bilinear depth lookups stay on the card.
    (0..n).map(|_| center + Vector3::new(rng.random_range(-0.3..0.3) * size, rng.random_range(-0.3..0.3) * size, 0.0)).collect()
}

/// Nearest-pixel depth test against rendered alpha-normalized depth.
pub fn occlusion_flags(xyz: &[[f64; 3]], num_frames: usize, cams: &[Camera], depths: &[Vec<f64>]) -> Vec<bool> {
    let mut out = vec![true; xyz.len()];
    for (i, p) in xyz.iter().enumerate() {
        let t = i % num_frames;
        let cam = &cams[t];
        let Ok((uv, z)) = cam.project_point(&Vector3::from(*p)) else { continue };
        let (x, y) = (uv.x.round(), uv.y.round());
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            continue;
        }
        let surface = depths[t][y as usize * cam.width + x as usize];
        out[i] = surface > 0.0 && z > surface * (1.0 + OCCLUSION_MARGIN);
    }
    out
}

pub fn generate(spec: &SceneSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t_count, k_count) = (spec.num_frames, spec.n_clusters);
    let cams: Vec<Camera> = (0..t_count).map(|t| spec.camera(t)).collect::<Result<_>>()?;

    let mut gs = GaussianSet::new();
    let mut labels = Vec::new();
    for k in 0..k_count {
        card(&mut gs, &mut rng, spec, spec.center(k), spec.card_size, spec.gaussians_per_cluster, hue(k), true);
        labels.resize(gs.len(), Some(k));
    }
    if spec.background_gaussians > 0 {
        let z = spec.scene_depth * 1.5;
        let size = 1.6 * z * spec.width.max(spec.height) as f64 / spec.focal_length();
        card(&mut gs, &mut rng, spec, Vector3::new(0.0, 0.0, z), size, spec.background_gaussians, [0.55, 0.55, 0.5], false);
        labels.resize(gs.len(), None);
    }
    let motion: Vec<Vec<RigidTransform>> = (0..k_count).map(|k| (0..t_count).map(|t| spec.motion(k).at(&spec.center(k), t)).collect()).collect();
    let poses_at = |t: usize| -> Vec<RigidTransform> { labels.iter().map(|l| l.map_or(RigidTransform::identity(), |k| motion[k][t])).collect() };

    let dyn_keep: Vec<bool> = labels.iter().map(Option::is_some).collect();
    let dyn_gs = gs.select(&dyn_keep);
    let mut images = Vec::with_capacity(t_count);
    let mut depths = Vec::with_capacity(t_count);
    let mut masks = Vec::with_capacity(t_count);
    for (t, cam) in cams.iter().enumerate() {
        let poses = poses_at(t);
        let full = rasterize_frame(&gs, &poses, cam)?;
        let dyn_poses: Vec<RigidTransform> = poses.iter().zip(&dyn_keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        let moving = rasterize_frame(&dyn_gs, &dyn_poses, cam)?;
        depths.push(full.expected_depth());
        images.push(full.image);
        masks.push(moving.alpha.iter().map(|&a| a >= VALID_ALPHA).collect::<Vec<bool>>());
    }

    let trajectories = |points: &[(usize, Vector3<f64>)]| -> Vec<[f64; 3]> {
        let mut xyz = Vec::with_capacity(points.len() * t_count);
        for (k, x) in points {
            for t in 0..t_count {
                xyz.push(motion[*k][t].apply(x).into());
            }
        }
        xyz
    };
    let mut track_pts = Vec::new();
    let mut eval_pts = Vec::new();
    for k in 0..k_count {
        track_pts.extend(sample_card_points(&mut rng, spec.center(k), spec.card_size, spec.points_per_cluster).into_iter().map(|x| (k, x)));
        eval_pts.extend(sample_card_points(&mut rng, spec.center(k), spec.card_size, spec.eval_points_per_cluster).into_iter().map(|x| (k, x)));
    }
    let xyz_gt = trajectories(&track_pts);
    let mut eval_xyz = trajectories(&eval_pts);
    let occluded = occlusion_flags(&xyz_gt, t_count, &cams, &depths);
    let mut eval_occluded = occlusion_flags(&eval_xyz, t_count, &cams, &depths);
    let (mut eval_uv, eval_query) = eval_views(&eval_xyz, &eval_occluded, t_count, &cams);
    if spec.eval_from_render {
        for (p, (k, _)) in eval_pts.iter().enumerate() {
            let q = eval_query[p];
            let pixel = eval_uv[p * t_count + q];
            let poses = poses_at(q);
            let hit = rasterize_tracks_at(&gs, &poses, &poses, &cams[q], &[pixel])?;
            if !hit.valid[0] {
                continue;
            }
            let canonical = motion[*k][q].inverse().apply(&Vector3::from(hit.xyz[0]));
            for t in 0..t_count {
                let x = motion[*k][t].apply(&canonical);
                eval_xyz[p * t_count + t] = x.into();
                if t != q {
                    eval_uv[p * t_count + t] = cams[t].project_point(&x).map(|(uv, _)| [uv.x, uv.y]).unwrap_or([f64::NAN; 2]);
                }
            }
        }
        eval_occluded = occlusion_flags(&eval_xyz, t_count, &cams, &depths);
    }

    let pixel_noise = Normal::new(0.0, spec.noise.track_sigma.max(0.0)).expect("finite sigma");
    let mut tracks = TrackTable::new(track_pts.len(), t_count);
    for i in 0..xyz_gt.len() {
        let t = i % t_count;
        let (uv, _) = cams[t].project_point(&Vector3::from(xyz_gt[i])).unwrap_or_default();
        let noise = [pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng)];
        let dropped = rng.random_bool(spec.noise.dropout);
        let observed = [uv.x + noise[0], uv.y + noise[1]];
        tracks.uv[i] = observed;
        tracks.visible[i] = !occluded[i] && !dropped && cams[t].in_bounds(&observed.into());
        if tracks.visible[i] {
            tracks.confidence[i] = (-(noise[0].hypot(noise[1]))).exp();
        }
    }

    let depth_noise = Normal::new(0.0, spec.noise.depth_sigma.max(0.0)).expect("finite sigma");
    let mut frames = Vec::with_capacity(t_count);
    let mut depth_affine = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let scale = rng.random_range(0.7..1.4);
        let shift = rng.random_range(-1.0..0.5);
        depth_affine.push([scale, shift]);
        let relative: Vec<f64> = depths[t]
            .iter()
            .map(|&d| {
                let n = depth_noise.sample(&mut rng);
                if d > 0.0 {
                    ((d * (1.0 + n) - shift) / scale).max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        let valid: Vec<usize> = (0..depths[t].len()).filter(|&p| depths[t][p] > 0.0).collect();
        let depth_refs = (0..spec.depth_refs_per_frame.min(valid.len()))
            .map(|_| {
                let p = valid[rng.random_range(0..valid.len())];
                DepthRef { u: (p % spec.width) as f64, v: (p / spec.width) as f64, depth: depths[t][p] }
            })
            .collect();
        frames.push(Frame { camera: cams[t], image: images[t].clone(), depth: relative, mask: masks[t].clone(), depth_refs });
    }

    let mut novel_views = Vec::with_capacity(spec.novel_views);
    let pivot = Vector3::new(0.0, 0.0, spec.scene_depth);
    for j in 0..spec.novel_views {
        let frame = if spec.novel_views > 1 { j * (t_count - 1) / (spec.novel_views - 1) } else { t_count / 2 };
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let turn = axis_angle(Vector3::new(0.3, 1.0, 0.0), sign * 4f64.to_radians());
        let orbit = RigidTransform::new(turn, pivot - turn * pivot);
        let base = cams[frame];
        let camera = Camera::new(base.k, base.extrinsics.compose(&orbit), base.width, base.height)?;
        let image = rasterize_frame(&gs, &poses_at(frame), &camera)?.image;
        novel_views.push(NovelView { frame, camera, image });
    }

    let truth = GroundTruth {
        num_frames: t_count,
        cluster_gt: track_pts.iter().map(|(k, _)| *k).collect(),
        xyz_gt,
        cams: cams.clone(),
        cluster_motion: motion,
        depth_affine,
        gaussians: gs,
        gaussian_labels: labels,
        bbox_diagonal: bbox_diagonal(&eval_xyz),
        eval_labels: eval_pts.iter().map(|(k, _)| *k).collect(),
        eval_xyz,
        eval_uv,
        eval_occluded,
        eval_query,
        novel_views,
        images,
        depths,
        masks,
    };
    let sequence = Sequence { width: spec.width, height: spec.height, frames };
    Ok(Synthetic { sequence, tracks, truth })
}

fn eval_views(xyz: &[[f64; 3]], occluded: &[bool], t_count: usize, cams: &[Camera]) -> (Vec<[f64; 2]>, Vec<usize>) {
    let uv = xyz
        .iter()
        .enumerate()
        .map(|(i, p)| cams[i % t_count].project_point(&Vector3::from(*p)).map(|(uv, _)| [uv.x, uv.y]).unwrap_or([f64::NAN; 2]))
        .collect();
    let query = (0..xyz.len() / t_count).map(|p| (0..t_count).find(|&t| !occluded[p * t_count + t]).unwrap_or(0)).collect();
    (uv, query)
}

pub fn bbox_diagonal(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if points.is_empty() {
        return 0.0;
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}
