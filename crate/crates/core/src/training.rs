//! Loss suite, optimizer groups and the joint training loop.

use std::rc::Rc;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, RigidTransform, ZNEAR};
use crate::grad::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::init::{align_sequence, initialize, lift_tracks, InitConfig, InitStrategy, Initialization};
use crate::motion::{second_difference, MotionBases, MotionCoeffs, MotionMode, MotionModel, MotionVars};
use crate::optim::{Adam, AdamHyper};
use crate::sequence::{Sequence, TrackTable};
use crate::splat::{composite, pixel_grid, project_all, project_gaussians, rasterize, rasterize_at, GaussianSet, VALID_ALPHA};
use crate::synthdata::GroundTruth;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_mask: f64,
    pub lambda_track2d: f64,
    pub lambda_trackdepth: f64,
    pub lambda_rigidity: f64,
    pub lambda_depthgrad: f64,
    pub lambda_smooth: f64,
    pub lambda_isotropy: f64,
    pub beta_rigidity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_depth: 0.5,
            lambda_mask: 1.0,
            lambda_track2d: 2.0,
            lambda_trackdepth: 0.1,
            lambda_rigidity: 0.1,
            lambda_depthgrad: 1.0,
            lambda_smooth: 0.1,
            lambda_isotropy: 0.1,
            beta_rigidity: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_depth,
            self.lambda_mask,
            self.lambda_track2d,
            self.lambda_trackdepth,
            self.lambda_rigidity,
            self.lambda_depthgrad,
            self.lambda_smooth,
            self.lambda_isotropy,
            self.beta_rigidity,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Adam rates per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub means: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub bases: f64,
    pub coeffs: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { means: 1.6e-4, opacity: 1e-2, scale: 5e-3, rotation: 1e-3, color: 1e-2, bases: 1.6e-4, coeffs: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub query_batch: usize,
    pub targets_per_query: usize,
    pub rigidity_centers: usize,
    pub rigidity_knn: usize,
    pub num_bases: usize,
    pub n_dynamic: usize,
    pub n_static: usize,
    pub prune_every: usize,
    pub prune_opacity: f64,
    /// Track observations below this confidence are ignored.
    pub min_track_confidence: f64,
    pub lr: LearningRates,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            query_batch: 8,
            targets_per_query: 4,
            rigidity_centers: 32,
            rigidity_knn: 16,
            num_bases: 20,
            n_dynamic: 40_000,
            n_static: 100_000,
            prune_every: 100,
            prune_opacity: 0.005,
            min_track_confidence: 0.05,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("query_batch", self.query_batch),
            ("targets_per_query", self.targets_per_query),
            ("rigidity_centers", self.rigidity_centers),
            ("rigidity_knn", self.rigidity_knn),
            ("num_bases", self.num_bases),
            ("n_dynamic", self.n_dynamic),
            ("prune_every", self.prune_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        self.weights.validate()
    }

    /// Steps per epoch so that an epoch draws `T` query frames in expectation.
    pub fn steps_per_epoch(&self, num_frames: usize) -> usize {
        num_frames.div_ceil(self.query_batch).max(1)
    }
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoTracks,
    NoInit,
    TranslBases,
    PerGaussian,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoTracks, Ablation::NoInit, Ablation::TranslBases, Ablation::PerGaussian];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoTracks => "no-tracks",
            Ablation::NoInit => "no-init",
            Ablation::TranslBases => "transl-bases",
            Ablation::PerGaussian => "per-gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Everything `fit` needs: initialization, training and the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    pub ablate: Option<Ablation>,
    pub init: InitConfig,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { seed: 0, ablate: None, init: InitConfig::default(), train: TrainConfig::default() }
    }
}

impl FitConfig {
    /// Init and train configs with counts, seed and ablation applied.
    pub fn resolved(&self) -> (InitConfig, TrainConfig) {
        let mut init = self.init.clone();
        let mut train = self.train.clone();
        init.num_bases = train.num_bases;
        init.n_dynamic = train.n_dynamic;
        init.n_static = train.n_static;
        init.seed = self.seed;
        match self.ablate {
            None => {}
            Some(Ablation::NoTracks) => {
                init.strategy = InitStrategy::DepthOnly;
                train.weights.lambda_track2d = 0.0;
                train.weights.lambda_trackdepth = 0.0;
            }
            Some(Ablation::NoInit) => init.strategy = InitStrategy::IdentityBases,
            Some(Ablation::TranslBases) => init.mode = MotionMode::TranslationBases,
            Some(Ablation::PerGaussian) => init.mode = MotionMode::PerGaussian,
        }
        (init, train)
    }
}

/// Canonical Gaussians (dynamic rows first) and the motion of the dynamic ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gaussians: GaussianSet,
    pub motion: MotionModel,
}

impl Scene {
    pub fn num_dynamic(&self) -> usize {
        self.gaussians.num_dynamic()
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians.validate()?;
        let nd = self.num_dynamic();
        if self.gaussians.dynamic[..nd].iter().any(|d| !d) || self.motion.num_gaussians() != nd {
            return Err(Error::ShapeMismatch(format!("{} dynamic Gaussians, motion for {}", nd, self.motion.num_gaussians())));
        }
        Ok(())
    }

    /// Per-Gaussian canonical-to-`t` poses; static Gaussians stay put.
    pub fn poses_at(&self, t: usize) -> Result<Vec<RigidTransform>> {
        let mut poses = self.motion.transforms_at(t)?;
        poses.resize(self.gaussians.len(), RigidTransform::identity());
        Ok(poses)
    }

    pub fn select(&self, keep: &[bool]) -> Scene {
        let nd = self.num_dynamic();
        Scene { gaussians: self.gaussians.select(keep), motion: self.motion.select(&keep[..nd]) }
    }

    /// The generator's scene: one basis per object, one-hot coefficients, canonical frame 0.
    pub fn from_ground_truth(truth: &GroundTruth) -> Result<Scene> {
        let order: Vec<usize> = (0..truth.gaussians.len()).filter(|&i| truth.gaussian_labels[i].is_some()).chain((0..truth.gaussians.len()).filter(|&i| truth.gaussian_labels[i].is_none())).collect();
        let mut gaussians = truth.gaussians.take(&order);
        for (k, &i) in order.iter().enumerate() {
            gaussians.dynamic[k] = truth.gaussian_labels[i].is_some();
        }
        let nd = gaussians.num_dynamic();
        let k_count = truth.cluster_motion.len();
        let mut bases = MotionBases::identity(k_count.max(1), truth.num_frames, 0)?;
        for (k, motion) in truth.cluster_motion.iter().enumerate() {
            for (t, tf) in motion.iter().enumerate() {
                bases.set(k, t, tf);
            }
        }
        let mut logits = Tensor::zeros(nd, k_count.max(1));
        for (r, &i) in order[..nd].iter().enumerate() {
            let own = truth.gaussian_labels[i].unwrap();
            for k in 0..k_count {
                logits.set(r, k, if k == own { 0.0 } else { -200.0 });
            }
        }
        let motion = MotionModel { mode: MotionMode::Se3, bases, coeffs: MotionCoeffs { logits }, offsets: Tensor::zeros(nd, 3 * truth.num_frames) };
        let scene = Scene { gaussians, motion };
        scene.validate()?;
        Ok(scene)
    }

    /// Argmax motion basis of each dynamic Gaussian.
    pub fn basis_labels(&self) -> Vec<usize> {
        self.motion.coeffs.argmax()
    }
}

/// Parameter groups in store order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Means,
    Quats,
    LogScales,
    Opacity,
    Colors,
    Rot6d,
    Transl,
    Logits,
    Offsets,
}

pub const GROUPS: [Group; 9] =
    [Group::Means, Group::Quats, Group::LogScales, Group::Opacity, Group::Colors, Group::Rot6d, Group::Transl, Group::Logits, Group::Offsets];

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Means => "means",
            Group::Quats => "quats",
            Group::LogScales => "log_scales",
            Group::Opacity => "opacity",
            Group::Colors => "colors",
            Group::Rot6d => "rot6d",
            Group::Transl => "transl",
            Group::Logits => "logits",
            Group::Offsets => "offsets",
        }
    }
}

/// A scene's tensors in a parameter store.
pub struct SceneParams {
    pub store: ParamStore,
    pub ids: [ParamId; 9],
    pub mode: MotionMode,
    pub t0: usize,
    pub num_frames: usize,
    pub num_dynamic: usize,
}

impl SceneParams {
    pub fn new(scene: &Scene) -> Self {
        let g = &scene.gaussians;
        let m = &scene.motion;
        let mut store = ParamStore::new();
        let values = [
            g.means.clone(),
            g.quats.clone(),
            g.log_scales.clone(),
            g.opacity_logits.clone(),
            g.colors.clone(),
            m.bases.rot6d.clone(),
            m.bases.transl.clone(),
            m.coeffs.logits.clone(),
            m.offsets.clone(),
        ];
        let ids = std::array::from_fn(|k| store.add(GROUPS[k].name(), values[k].clone()));
        Self { store, ids, mode: m.mode, t0: m.t0(), num_frames: m.num_frames(), num_dynamic: scene.num_dynamic() }
    }

    pub fn id(&self, g: Group) -> ParamId {
        self.ids[g as usize]
    }

    pub fn value(&self, g: Group) -> &Tensor {
        self.store.value(self.id(g))
    }

    /// Writes the store back into `scene`, renormalizing quaternions and pinning the canonical frame.
    pub fn write_back(&self, scene: &mut Scene) {
        let g = &mut scene.gaussians;
        g.means = self.value(Group::Means).clone();
        g.quats = self.value(Group::Quats).clone();
        for r in 0..g.quats.rows() {
            let row = g.quats.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        g.log_scales = self.value(Group::LogScales).clone();
        g.opacity_logits = self.value(Group::Opacity).clone();
        g.colors = self.value(Group::Colors).clone();
        let m = &mut scene.motion;
        m.bases.rot6d = self.value(Group::Rot6d).clone();
        m.bases.transl = self.value(Group::Transl).clone();
        m.coeffs.logits = self.value(Group::Logits).clone();
        m.offsets = self.value(Group::Offsets).clone();
        m.pin_canonical();
    }

    /// Learning rate per group in store order; groups unused by the motion mode get 0.
    pub fn learning_rates(&self, lr: &LearningRates) -> Vec<f64> {
        GROUPS
            .iter()
            .map(|g| match g {
                Group::Means => lr.means,
                Group::Quats => lr.rotation,
                Group::LogScales => lr.scale,
                Group::Opacity => lr.opacity,
                Group::Colors => lr.color,
                Group::Rot6d if self.mode == MotionMode::Se3 => lr.bases,
                Group::Transl if self.mode != MotionMode::PerGaussian => lr.bases,
                Group::Logits if self.mode != MotionMode::PerGaussian => lr.coeffs,
                Group::Offsets if self.mode == MotionMode::PerGaussian => lr.bases,
                _ => 0.0,
            })
            .collect()
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> Result<SceneVars<'t>> {
        self.vars_in(tape, &self.store)
    }

    /// Handles on `store`, which must share this layout.
    pub fn vars_in<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<SceneVars<'t>> {
        let p = |g| tape.param(store, self.id(g));
        let quats = p(Group::Quats).normalize_rows();
        Ok(SceneVars {
            means: p(Group::Means),
            rotmats: quats.quat_to_rotmat(),
            scales: p(Group::LogScales).exp(),
            opacity: p(Group::Opacity).sigmoid(),
            colors: p(Group::Colors),
            motion: MotionVars {
                mode: self.mode,
                t0: self.t0,
                rot6d: p(Group::Rot6d),
                transl: p(Group::Transl),
                logits: p(Group::Logits),
                offsets: p(Group::Offsets),
            },
            num_dynamic: self.num_dynamic,
            num_frames: self.num_frames,
        })
    }
}

/// Differentiable handles on a scene.
#[derive(Clone, Copy)]
pub struct SceneVars<'t> {
    pub means: Var<'t>,
    pub rotmats: Var<'t>,
    pub scales: Var<'t>,
    pub opacity: Var<'t>,
    pub colors: Var<'t>,
    pub motion: MotionVars<'t>,
    pub num_dynamic: usize,
    pub num_frames: usize,
}

fn range_rows(a: usize, b: usize) -> Rc<Vec<usize>> {
    Rc::new((a..b).collect())
}

impl<'t> SceneVars<'t> {
    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dynamic_rows(&self, v: Var<'t>) -> Var<'t> {
        v.gather_rows(range_rows(0, self.num_dynamic))
    }

    /// Means and rotations of every Gaussian at frame `t`.
    pub fn posed(&self, t: usize) -> Result<(Var<'t>, Var<'t>)> {
        let (n, nd) = (self.len(), self.num_dynamic);
        if nd == 0 {
            return Ok((self.means, self.rotmats));
        }
        let w = self.motion.weights();
        let (r, tr) = self.motion.transforms_at(w, t)?;
        let mu = r.rigid_apply(self.dynamic_rows(self.means), tr);
        let rot = r.rotmat_mul(self.dynamic_rows(self.rotmats));
        if nd == n {
            return Ok((mu, rot));
        }
        let rest = range_rows(nd, n);
        Ok((
            Var::concat_rows(&[mu, self.means.gather_rows(rest.clone())]),
            Var::concat_rows(&[rot, self.rotmats.gather_rows(rest)]),
        ))
    }

    /// Positions of the Gaussians `idx` (dynamic rows) at frame `t`.
    pub fn dynamic_positions(&self, idx: Rc<Vec<usize>>, t: usize) -> Result<Var<'t>> {
        let w = self.motion.weights().gather_rows(idx.clone());
        let mu = self.means.gather_rows(idx.clone());
        match self.motion.mode {
            MotionMode::PerGaussian => {
                let motion = MotionVars { offsets: self.motion.offsets.gather_rows(idx), ..self.motion };
                let (r, tr) = motion.transforms_at(w, t)?;
                Ok(r.rigid_apply(mu, tr))
            }
            _ => {
                let (r, tr) = self.motion.transforms_at(w, t)?;
                Ok(r.rigid_apply(mu, tr))
            }
        }
    }
}

/// Observed frame data in tensor form.
#[derive(Clone, Debug)]
pub struct FrameTarget {
    pub width: usize,
    pub height: usize,
    /// `S×3` colors.
    pub image: Tensor,
    /// Metric depth; nonpositive entries are missing.
    pub depth: Vec<f64>,
    /// `S×1`, 1 inside the moving-object mask.
    pub mask: Tensor,
}

impl FrameTarget {
    pub fn new(width: usize, height: usize, image: &[[f64; 3]], depth: &[f64], mask: &[bool]) -> Self {
        Self {
            width,
            height,
            image: Tensor::from_rows(image),
            depth: depth.to_vec(),
            mask: Tensor::column(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()),
        }
    }

    pub fn from_sequence(seq: &Sequence, depths: &[Vec<f64>]) -> Vec<FrameTarget> {
        seq.frames.iter().zip(depths).map(|(f, d)| FrameTarget::new(seq.width, seq.height, &f.image, d, &f.mask)).collect()
    }
}

/// Renders color, camera depth, dynamic alpha and alpha (`S×6`) on the full pixel grid.
pub fn render_frame_vars<'t>(sv: &SceneVars<'t>, proj: Var<'t>, cam: &Camera) -> Var<'t> {
    let tape = proj.tape();
    let n = sv.len();
    let dyn_col = Tensor::column((0..n).map(|i| if i < sv.num_dynamic { 1.0 } else { 0.0 }).collect());
    let payload = Var::concat_cols(&[sv.colors, proj.col_slice(5, 1), tape.constant(dyn_col)]);
    rasterize(proj, sv.opacity, payload, Rc::new(pixel_grid(cam.width, cam.height)))
}

/// Weighted reconstruction terms of one frame.
pub struct ReconLoss<'t> {
    pub rgb: Var<'t>,
    pub depth: Var<'t>,
    pub mask: Var<'t>,
    pub depthgrad: Var<'t>,
}

impl<'t> ReconLoss<'t> {
    pub fn total(&self) -> Var<'t> {
        self.rgb + self.depth + self.mask + self.depthgrad
    }
}

fn depth_gradient_pairs(target: &FrameTarget) -> (Vec<usize>, Vec<usize>) {
    let (w, h) = (target.width, target.height);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let ok = |i: usize| target.depth[i] > 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && ok(i) && ok(i + 1) {
                a.push(i);
                b.push(i + 1);
            }
            if y + 1 < h && ok(i) && ok(i + w) {
                a.push(i);
                b.push(i + w);
            }
        }
    }
    (a, b)
}

/// Photometric, depth, mask and depth-gradient ℓ1 terms of a rendered `S×6` frame; each is a mean.
pub fn loss_recon<'t>(rendered: Var<'t>, target: &FrameTarget, w: &LossWeights) -> Result<ReconLoss<'t>> {
    let tape = rendered.tape();
    let s = target.width * target.height;
    if rendered.shape() != (s, 6) || target.image.rows() != s || target.depth.len() != s || target.mask.rows() != s {
        return Err(Error::ShapeMismatch(format!("render {:?} against a {}x{} frame", rendered.shape(), target.width, target.height)));
    }
    let rgb = (rendered.col_slice(0, 3) - tape.constant(target.image.clone())).abs().mean();
    let depth = rendered.col_slice(3, 1);
    let valid: Vec<bool> = target.depth.iter().map(|&d| d > 0.0).collect();
    let dz = (depth - tape.constant(Tensor::column(target.depth.clone()))).abs().masked_mean(&valid);
    let mask = (rendered.col_slice(4, 1) - tape.constant(target.mask.clone())).abs().mean();
    let (a, b) = depth_gradient_pairs(target);
    let depthgrad = if a.is_empty() {
        tape.scalar(0.0)
    } else {
        let k = a.len();
        let want = Tensor::column(a.iter().zip(&b).map(|(&i, &j)| target.depth[j] - target.depth[i]).collect());
        let got = depth.gather_flat(Rc::new(b), k, 1) - depth.gather_flat(Rc::new(a), k, 1);
        (got - tape.constant(want)).abs().mean()
    };
    Ok(ReconLoss {
        rgb,
        depth: dz.scale(w.lambda_depth),
        mask: mask.scale(w.lambda_mask),
        depthgrad: depthgrad.scale(w.lambda_depthgrad),
    })
}

/// Weighted 2D and depth terms of the correspondence loss.
pub struct TrackLoss<'t> {
    pub track2d: Var<'t>,
    pub trackdepth: Var<'t>,
}

/// Correspondence loss over valid rows: `λ₂ · mean ‖Û − U‖₁ / max_edge + λ_d · mean |ẑ − D̂(Û)|`.
pub fn loss_track<'t>(
    uv_pred: Var<'t>,
    depth_pred: Var<'t>,
    uv_obs: &[[f64; 2]],
    depth_rendered: Var<'t>,
    max_edge: usize,
    w: &LossWeights,
) -> TrackLoss<'t> {
    let tape = uv_pred.tape();
    if uv_obs.is_empty() {
        return TrackLoss { track2d: tape.scalar(0.0), trackdepth: tape.scalar(0.0) };
    }
    let n = uv_obs.len() as f64;
    let obs = tape.constant(Tensor::from_rows(uv_obs));
    let track2d = (uv_pred - obs).abs().sum().scale(w.lambda_track2d / (max_edge as f64 * n));
    let trackdepth = (depth_pred - depth_rendered).abs().mean().scale(w.lambda_trackdepth);
    TrackLoss { track2d, trackdepth }
}

/// k nearest neighbors (by position at the query time) of each center, as `(center, neighbor)` pairs.
pub fn knn_pairs(positions: &Tensor, centers: &[usize], k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(centers.len() * k);
    for &c in centers {
        let pc = positions.row(c);
        let mut cand: Vec<(f64, usize)> = (0..positions.rows())
            .filter(|&j| j != c)
            .map(|j| (positions.row(j).iter().zip(pc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.extend(cand.into_iter().take(k).map(|(_, j)| (c, j)));
    }
    pairs
}

/// Mean over pairs of `exp(−β d_t) · (d_t − d_t')²`.
pub fn loss_rigidity<'t>(pos_t: Var<'t>, pos_tp: Var<'t>, pairs: &[(usize, usize)], beta: f64) -> Var<'t> {
    let tape = pos_t.tape();
    let pt = pos_t.value();
    let pairs: Vec<(usize, usize)> =
        pairs.iter().copied().filter(|&(a, b)| (0..3).map(|k| (pt.get(a, k) - pt.get(b, k)).powi(2)).sum::<f64>() > 1e-24).collect();
    if pairs.is_empty() {
        return tape.scalar(0.0);
    }
    let ia = Rc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ib = Rc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let dist = |p: Var<'t>| (p.gather_rows(ia.clone()) - p.gather_rows(ib.clone())).row_norm();
    let (dt, dtp) = (dist(pos_t), dist(pos_tp));
    (dt.scale(-beta).exp() * (dt - dtp).square()).mean()
}

/// Summed squared second differences of the motion bases (and per-Gaussian offsets, averaged over Gaussians).
pub fn loss_bases_acceleration<'t>(motion: &MotionVars<'t>, num_frames: usize) -> Var<'t> {
    let tape = motion.transl.tape();
    if num_frames < 3 {
        return tape.scalar(0.0);
    }
    let accel = |v: Var<'t>, width: usize| v.matmul(tape.constant(second_difference(num_frames, width))).square().sum();
    match motion.mode {
        MotionMode::Se3 => accel(motion.rot6d, 6) + accel(motion.transl, 3),
        MotionMode::TranslationBases => accel(motion.transl, 3),
        MotionMode::PerGaussian => {
            let n = motion.offsets.rows().max(1) as f64;
            accel(motion.offsets, 3).scale(1.0 / n)
        }
    }
}

/// Mean squared camera-frame z acceleration from positions at `t−1, t, t+1`.
pub fn loss_z_acceleration<'t>(prev: Var<'t>, cur: Var<'t>, next: Var<'t>, cams: [&Camera; 3]) -> Var<'t> {
    let z = |p: Var<'t>, cam: &Camera| p.transform_points(&cam.extrinsics).col_slice(2, 1);
    (z(next, cams[2]) - z(cur, cams[1]).scale(2.0) + z(prev, cams[0])).square().mean()
}

/// Mean per-Gaussian variance of the three scales.
pub fn loss_isotropy<'t>(scales: Var<'t>) -> Var<'t> {
    if scales.rows() == 0 {
        return scales.tape().scalar(0.0);
    }
    scales.row_variance().mean()
}

/// Loss term names, in CSV column order.
pub const TERMS: [&str; 9] = ["rgb", "depth", "mask", "depthgrad", "track2d", "trackdepth", "rigidity", "smooth", "isotropy"];

/// Weighted loss values of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub terms: [f64; 9],
    pub total: f64,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = format!("step,epoch,{},total\n", TERMS.join(","));
    for r in history {
        s.push_str(&format!("{},{}", r.step, r.epoch));
        for v in r.terms.iter().chain([&r.total]) {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}

/// Whether the mean of the last `window` totals is below the mean of the first `window`.
pub fn loss_trend_decreasing(history: &[LossRecord], window: usize) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    mean(&history[history.len() - window..]) < mean(&history[..window])
}

struct Accum<'t> {
    terms: Vec<(usize, Var<'t>)>,
}

impl<'t> Accum<'t> {
    fn push(&mut self, term: usize, v: Var<'t>, scale: f64) {
        self.terms.push((term, v.scale(scale)));
    }

    fn by_term(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        (0..TERMS.len()).map(|k| self.terms.iter().filter(|(j, _)| *j == k).fold(tape.scalar(0.0), |acc, (_, v)| acc + *v)).collect()
    }
}

/// Optimizer progress carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(scene: &Scene, seed: u64) -> Self {
        let params = SceneParams::new(scene);
        Self { step: 0, adam: Adam::new(&params.store, AdamHyper::default()), rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e) }
    }
}

/// Training inputs, scene and optimizer state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub targets: Vec<FrameTarget>,
    pub cams: Vec<Camera>,
    pub tracks: TrackTable,
    pub scene: Scene,
    pub state: TrainState,
    pub history: Vec<LossRecord>,
}

/// Frames sampled for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPlan {
    pub frame: usize,
    pub targets: Vec<usize>,
    /// Dynamic Gaussians anchoring the rigidity graph and the depth-acceleration term.
    pub centers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub queries: Vec<QueryPlan>,
}

struct FrameVars<'t> {
    means: Var<'t>,
    proj: Var<'t>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, targets: Vec<FrameTarget>, cams: Vec<Camera>, tracks: TrackTable, scene: Scene, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        if targets.len() != cams.len() || tracks.num_frames != cams.len() || scene.motion.num_frames() != cams.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets, {} cameras, {} track frames, {} motion frames",
                targets.len(),
                cams.len(),
                tracks.num_frames,
                scene.motion.num_frames()
            )));
        }
        Ok(Self { cfg, targets, cams, tracks, scene, state, history: Vec::new() })
    }

    pub fn num_frames(&self) -> usize {
        self.cams.len()
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.epochs * self.cfg.steps_per_epoch(self.num_frames())) as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn usable(&self, p: usize, t: usize) -> bool {
        let i = self.tracks.idx(p, t);
        self.tracks.visible[i] && self.tracks.confidence[i] >= self.cfg.min_track_confidence
    }

    fn frame_vars<'t>(&self, sv: &SceneVars<'t>, cache: &mut [Option<FrameVars<'t>>], t: usize) -> Result<(Var<'t>, Var<'t>)> {
        if cache[t].is_none() {
            let (means, rots) = sv.posed(t)?;
            let proj = project_gaussians(means, rots, sv.scales, &self.cams[t]);
            cache[t] = Some(FrameVars { means, proj });
        }
        let f = cache[t].as_ref().unwrap();
        Ok((f.means, f.proj))
    }

    /// Track terms for query `t` and target `tp`.
    fn track_terms<'t>(&self, sv: &SceneVars<'t>, cache: &mut [Option<FrameVars<'t>>], t: usize, tp: usize) -> Result<Option<TrackLoss<'t>>> {
        let w = &self.cfg.weights;
        if w.lambda_track2d == 0.0 && w.lambda_trackdepth == 0.0 {
            return Ok(None);
        }
        let pts: Vec<usize> = (0..self.tracks.num_points).filter(|&p| self.usable(p, t) && self.usable(p, tp)).collect();
        if pts.is_empty() || sv.num_dynamic == 0 {
            return Ok(None);
        }
        let (_, proj_t) = self.frame_vars(sv, cache, t)?;
        let (means_tp, proj_tp) = self.frame_vars(sv, cache, tp)?;
        let dyn_idx = range_rows(0, sv.num_dynamic);
        let samples = Rc::new(pts.iter().map(|&p| self.tracks.uv[self.tracks.idx(p, t)]).collect::<Vec<_>>());
        let out = rasterize(proj_t.gather_rows(dyn_idx.clone()), sv.opacity.gather_rows(dyn_idx.clone()), means_tp.gather_rows(dyn_idx), samples);
        let xyz = out.col_slice(0, 3).alpha_normalize(out.col_slice(3, 1), VALID_ALPHA);
        let cam = &self.cams[tp];
        let xc = xyz.transform_points(&cam.extrinsics);
        let uv = xc.perspective(cam);
        let z = xc.col_slice(2, 1);

        let (alpha, zv) = (out.value(), z.value());
        let keep: Vec<usize> = (0..pts.len()).filter(|&k| alpha.get(k, 3) >= VALID_ALPHA && zv.get(k, 0) > ZNEAR).collect();
        if keep.is_empty() {
            return Ok(None);
        }
        let keep_rc = Rc::new(keep.clone());
        let payload = proj_tp.col_slice(5, 1);
        let target = rasterize_at(proj_tp, sv.opacity, payload, uv.gather_rows(keep_rc.clone()));
        let tv = target.value();
        let rows: Vec<usize> = (0..keep.len()).filter(|&k| tv.get(k, 1) >= VALID_ALPHA).collect();
        let depth_rendered = target.col_slice(0, 1).alpha_normalize(target.col_slice(1, 1), VALID_ALPHA);
        let rows_rc = Rc::new(rows.clone());
        let obs: Vec<[f64; 2]> = rows.iter().map(|&k| self.tracks.uv[self.tracks.idx(pts[keep[k]], tp)]).collect();
        if obs.is_empty() {
            return Ok(None);
        }
        let uv_k = uv.gather_rows(keep_rc.clone()).gather_rows(rows_rc.clone());
        let z_k = z.gather_rows(keep_rc).gather_rows(rows_rc.clone());
        Ok(Some(loss_track(uv_k, z_k, &obs, depth_rendered.gather_rows(rows_rc), cam.max_edge(), w)))
    }

    fn draw_targets(&mut self, t: usize) -> Vec<usize> {
        let n = self.num_frames();
        let k = self.cfg.targets_per_query.min(n - 1);
        let mut picks: Vec<usize> = sample(&mut self.state.rng, n - 1, k).into_iter().map(|j| if j >= t { j + 1 } else { j }).collect();
        picks.sort_unstable();
        picks
    }

    /// Draws the query frames, their targets and rigidity centers for one step.
    pub fn draw_plan(&mut self) -> StepPlan {
        let t_count = self.num_frames();
        let nd = self.scene.num_dynamic();
        let queries: Vec<usize> = (0..self.cfg.query_batch).map(|_| self.state.rng.random_range(0..t_count)).collect();
        let queries = queries
            .into_iter()
            .map(|t| {
                let targets = self.draw_targets(t);
                let centers = if nd > 1 { sample(&mut self.state.rng, nd, self.cfg.rigidity_centers.min(nd)).into_vec() } else { Vec::new() };
                QueryPlan { frame: t, targets, centers }
            })
            .collect();
        StepPlan { queries }
    }

    /// Total loss of `plan` and its weighted terms.
    pub fn objective<'t>(&self, sv: &SceneVars<'t>, plan: &StepPlan) -> Result<(Var<'t>, [f64; 9])> {
        let terms = self.objective_terms(sv, plan)?;
        let values = std::array::from_fn(|k| terms[k].item());
        let total = terms.iter().skip(1).fold(terms[0], |acc, v| acc + *v);
        Ok((total, values))
    }

    /// Each weighted term of the loss of `plan`, in [`TERMS`] order.
    pub fn objective_terms<'t>(&self, sv: &SceneVars<'t>, plan: &StepPlan) -> Result<Vec<Var<'t>>> {
        let w = &self.cfg.weights;
        let t_count = self.num_frames();
        let nd = sv.num_dynamic;
        let tape = sv.means.tape();
        let mut cache: Vec<Option<FrameVars>> = (0..t_count).map(|_| None).collect();
        let mut acc = Accum { terms: Vec::new() };
        let qn = 1.0 / plan.queries.len().max(1) as f64;
        for q in &plan.queries {
            let t = q.frame;
            let (_, proj) = self.frame_vars(sv, &mut cache, t)?;
            let rendered = render_frame_vars(sv, proj, &self.cams[t]);
            let recon = loss_recon(rendered, &self.targets[t], w)?;
            for (k, v) in [recon.rgb, recon.depth, recon.mask, recon.depthgrad].into_iter().enumerate() {
                acc.push(k, v, qn);
            }
            let tn = qn / q.targets.len().max(1) as f64;
            let pairs = if w.lambda_rigidity > 0.0 && !q.centers.is_empty() {
                let (means_t, _) = self.frame_vars(sv, &mut cache, t)?;
                knn_pairs(&means_t.value().take_rows(&(0..nd).collect::<Vec<_>>()), &q.centers, self.cfg.rigidity_knn)
            } else {
                Vec::new()
            };
            for &tp in &q.targets {
                if let Some(tl) = self.track_terms(sv, &mut cache, t, tp)? {
                    acc.push(4, tl.track2d, tn);
                    acc.push(5, tl.trackdepth, tn);
                }
                if !pairs.is_empty() {
                    let (means_t, _) = self.frame_vars(sv, &mut cache, t)?;
                    let (means_tp, _) = self.frame_vars(sv, &mut cache, tp)?;
                    acc.push(6, loss_rigidity(means_t, means_tp, &pairs, w.beta_rigidity), tn * w.lambda_rigidity);
                }
            }
            if w.lambda_smooth > 0.0 && t >= 1 && t + 1 < t_count && !q.centers.is_empty() {
                let idx = Rc::new(q.centers.clone());
                let p = |s: usize| sv.dynamic_positions(idx.clone(), s);
                let z = loss_z_acceleration(p(t - 1)?, p(t)?, p(t + 1)?, [&self.cams[t - 1], &self.cams[t], &self.cams[t + 1]]);
                acc.push(7, z, qn * w.lambda_smooth);
            }
        }
        if w.lambda_smooth > 0.0 {
            acc.push(7, loss_bases_acceleration(&sv.motion, t_count), w.lambda_smooth);
        }
        if w.lambda_isotropy > 0.0 && nd > 0 {
            acc.push(8, loss_isotropy(sv.scales.gather_rows(range_rows(0, nd))), w.lambda_isotropy);
        }
        Ok(acc.by_term(tape))
    }

    /// One optimizer step; the scene and state are left unchanged when it fails.
    pub fn step(&mut self) -> Result<LossRecord> {
        let saved_rng = self.state.rng.clone();
        let plan = self.draw_plan();
        let result = self.apply_step(&plan);
        if result.is_err() {
            self.state.rng = saved_rng;
        }
        result
    }

    fn apply_step(&mut self, plan: &StepPlan) -> Result<LossRecord> {
        let mut params = SceneParams::new(&self.scene);
        let tape = Tape::new();
        let sv = params.vars(&tape)?;
        let (loss, terms) = self.objective(&sv, plan)?;
        let total = loss.item();
        if !total.is_finite() {
            return Err(Error::NonFiniteValue { op: "training loss".into() });
        }
        tape.backward(loss, &mut params.store)?;
        let mut adam = self.state.adam.clone();
        let lrs = params.learning_rates(&self.cfg.lr);
        adam.step(&mut params.store, &lrs);
        if params.store.ids().any(|id| !params.store.value(id).is_finite()) {
            return Err(Error::NonFiniteValue { op: "optimizer step".into() });
        }
        params.write_back(&mut self.scene);
        self.state.adam = adam;
        self.state.step += 1;
        let steps_per_epoch = self.cfg.steps_per_epoch(self.num_frames()) as u64;
        let record = LossRecord { step: self.state.step, epoch: ((self.state.step - 1) / steps_per_epoch) as usize, terms, total };
        self.history.push(record.clone());
        if self.state.step % self.cfg.prune_every as u64 == 0 {
            self.prune();
        }
        Ok(record)
    }

    /// Drops Gaussians whose opacity fell below the threshold; returns how many went.
    pub fn prune(&mut self) -> usize {
        let keep: Vec<bool> = (0..self.scene.gaussians.len()).map(|i| self.scene.gaussians.opacity(i) >= self.cfg.prune_opacity).collect();
        let dropped = keep.iter().filter(|k| !**k).count();
        if dropped == 0 {
            return 0;
        }
        let nd = self.scene.num_dynamic();
        let offsets_rows = self.scene.motion.offsets.rows();
        for (k, g) in GROUPS.iter().enumerate() {
            match g {
                Group::Means | Group::Quats | Group::LogScales | Group::Opacity | Group::Colors => self.state.adam.select_rows(k, &keep),
                Group::Logits => self.state.adam.select_rows(k, &keep[..nd]),
                Group::Offsets if offsets_rows == nd => self.state.adam.select_rows(k, &keep[..nd]),
                _ => {}
            }
        }
        self.scene = self.scene.select(&keep);
        dropped
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &LossRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let record = self.step()?;
            on_step(self, &record)?;
        }
        Ok(())
    }
}

/// Initializes from the sequence and builds a trainer.
pub fn prepare(seq: &Sequence, tracks: &TrackTable, cfg: &FitConfig) -> Result<(Trainer, Initialization)> {
    let (init_cfg, train_cfg) = cfg.resolved();
    train_cfg.validate()?;
    let init = initialize(seq, tracks, &init_cfg)?;
    let scene = Scene { gaussians: init.gaussians.clone(), motion: init.motion.clone() };
    let state = TrainState::new(&scene, cfg.seed);
    let targets = FrameTarget::from_sequence(seq, &init.depths);
    let trainer = Trainer::new(train_cfg, targets, seq.cameras(), init.tracks.clone(), scene, state)?;
    Ok((trainer, init))
}

/// Rebuilds a trainer around a saved scene, optimizer state and loss history.
pub fn resume(seq: &Sequence, tracks: &TrackTable, cfg: &FitConfig, scene: Scene, state: TrainState, history: Vec<LossRecord>) -> Result<Trainer> {
    let (_, train_cfg) = cfg.resolved();
    train_cfg.validate()?;
    seq.validate()?;
    tracks.validate()?;
    let (_, depths) = align_sequence(seq)?;
    let lifted = lift_tracks(tracks, &depths, &seq.cameras())?;
    let targets = FrameTarget::from_sequence(seq, &depths);
    let mut trainer = Trainer::new(train_cfg, targets, seq.cameras(), lifted, scene, state)?;
    trainer.history = history;
    Ok(trainer)
}

/// Predicted 3D and 2D tracks, `P×T` point-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTracks {
    pub num_frames: usize,
    pub xyz: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub occluded: Vec<bool>,
}

/// Relative margin beyond the rendered target depth at which a correspondence counts as occluded.
pub const OCCLUSION_DEPTH_MARGIN: f64 = 0.05;

/// Follows each query `(frame, pixel)` through every frame by rendering the dynamic Gaussians' positions.
pub fn predict_tracks(scene: &Scene, cams: &[Camera], queries: &[(usize, [f64; 2])]) -> Result<PredictedTracks> {
    let t_count = cams.len();
    let gs = &scene.gaussians;
    let nd = scene.num_dynamic();
    let n = queries.len();
    let mut out = PredictedTracks { num_frames: t_count, xyz: vec![[0.0; 3]; n * t_count], uv: vec![[0.0; 2]; n * t_count], occluded: vec![true; n * t_count] };
    let mut posed = Vec::with_capacity(t_count);
    for (t, cam) in cams.iter().enumerate() {
        let (means, rots) = gs.posed(&scene.poses_at(t)?)?;
        let proj = project_all(cam, &means, &rots, &gs.scales());
        posed.push((means, proj));
    }
    let dyn_rows: Vec<usize> = (0..nd).collect();
    let opacity = gs.opacities();
    let dyn_opacity = opacity.take_rows(&dyn_rows);
    for t in 0..t_count {
        let members: Vec<usize> = (0..n).filter(|&q| queries[q].0 == t).collect();
        if members.is_empty() {
            continue;
        }
        let samples: Vec<[f64; 2]> = members.iter().map(|&q| queries[q].1).collect();
        let proj_t = posed[t].1.take_rows(&dyn_rows);
        for (tp, cam) in cams.iter().enumerate() {
            let payload = posed[tp].0.take_rows(&dyn_rows);
            let track = composite(&proj_t, &dyn_opacity, &payload, &samples);
            let mut uvs = Vec::with_capacity(members.len());
            let mut depth_z = Vec::with_capacity(members.len());
            for (k, &q) in members.iter().enumerate() {
                let a = track.get(k, 3);
                let i = q * t_count + tp;
                if a > 1e-12 {
                    out.xyz[i] = [track.get(k, 0) / a, track.get(k, 1) / a, track.get(k, 2) / a];
                }
                let xc = cam.extrinsics.apply(&Vector3::from(out.xyz[i]));
                let px = cam.pixel_from_camera(&Vector3::new(xc.x, xc.y, xc.z.max(ZNEAR)));
                out.uv[i] = [px.x, px.y];
                uvs.push(out.uv[i]);
                depth_z.push((a >= VALID_ALPHA && xc.z > ZNEAR, xc.z));
            }
            let depth_payload = Tensor::column((0..gs.len()).map(|r| posed[tp].1.get(r, 5)).collect());
            let rendered = composite(&posed[tp].1, &opacity, &depth_payload, &uvs);
            for (k, &q) in members.iter().enumerate() {
                let (ok, z) = depth_z[k];
                let a = rendered.get(k, 1);
                let visible = ok && cam.in_bounds(&nalgebra::Vector2::new(uvs[k][0], uvs[k][1])) && (a < VALID_ALPHA || z <= rendered.get(k, 0) / a * (1.0 + OCCLUSION_DEPTH_MARGIN));
                out.occluded[q * t_count + tp] = !visible;
            }
        }
    }
    Ok(out)
}
