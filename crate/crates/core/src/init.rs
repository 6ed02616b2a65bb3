//! Scene initialization from aligned depth and lifted 2D tracks.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, RigidTransform, Rotation6D};
use crate::grad::{ParamStore, Tape, Tensor, Var};
use crate::motion::{second_difference, MotionBases, MotionCoeffs, MotionMode, MotionModel, MotionVars};
use crate::optim::{exp_decay, Adam, AdamHyper};
use crate::sequence::{DepthRef, Sequence, TrackTable};
use crate::splat::GaussianSet;

/// Largest accepted condition number of the depth normal equations.
pub const MAX_CONDITION: f64 = 1e12;

/// Per-frame affine map from relative to metric depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
    pub rms: f64,
}

impl DepthAlignment {
    pub fn apply(&self, rel: &[f64]) -> Vec<f64> {
        rel.iter().map(|&d| if d > 0.0 { (self.scale * d + self.shift).max(0.0) } else { 0.0 }).collect()
    }
}

/// Bilinear lookup at pixel coordinates; `None` off the grid or if a neighbor is nonpositive.
pub fn sample_bilinear(values: &[f64], width: usize, height: usize, u: f64, v: f64) -> Option<f64> {
    if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
        return None;
    }
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let c = [values[y0 * width + x0], values[y0 * width + x1], values[y1 * width + x0], values[y1 * width + x1]];
    if c.iter().any(|&d| !(d > 0.0)) {
        return None;
    }
    Some((1.0 - fy) * ((1.0 - fx) * c[0] + fx * c[1]) + fy * ((1.0 - fx) * c[2] + fx * c[3]))
}

/// Least-squares `metric ≈ scale · relative + shift` from sparse samples.
pub fn align_depth(rel: &[f64], width: usize, height: usize, refs: &[DepthRef]) -> Result<DepthAlignment> {
    let pairs: Vec<(f64, f64)> = refs.iter().filter_map(|r| sample_bilinear(rel, width, height, r.u, r.v).map(|d| (d, r.depth))).collect();
    if pairs.len() < 2 {
        return Err(Error::DegenerateSamples(format!("{} usable samples", pairs.len())));
    }
    let n = pairs.len() as f64;
    let (sr, srr) = pairs.iter().fold((0.0, 0.0), |(s, ss), (r, _)| (s + r, ss + r * r));
    let normal = Matrix2::new(srr, sr, sr, n);
    let eig = normal.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateSamples(format!("normal equations have condition {:.3e}", hi / lo)));
    }
    let (mr, md) = (sr / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let (cov, var) = pairs.iter().fold((0.0, 0.0), |(c, v), (r, d)| (c + (r - mr) * (d - md), v + (r - mr) * (r - mr)));
    let scale = cov / var;
    let shift = md - scale * mr;
    if !(scale > 0.0) {
        return Err(Error::DegenerateSamples(format!("nonpositive depth scale {scale}")));
    }
    let rms = (pairs.iter().map(|(r, d)| (scale * r + shift - d).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DepthAlignment { scale, shift, rms })
}

/// Unprojects visible tracks through metric depth; unusable entries become invisible.
pub fn lift_tracks(tracks: &TrackTable, depths: &[Vec<f64>], cams: &[Camera]) -> Result<TrackTable> {
    if depths.len() != tracks.num_frames || cams.len() != tracks.num_frames {
        return Err(Error::ShapeMismatch(format!("{} depth maps and {} cameras for {} frames", depths.len(), cams.len(), tracks.num_frames)));
    }
    let mut out = tracks.clone();
    for p in 0..tracks.num_points {
        for t in 0..tracks.num_frames {
            let i = tracks.idx(p, t);
            out.xyz[i] = [f64::NAN; 3];
            if !tracks.visible[i] {
                continue;
            }
            let cam = &cams[t];
            let [u, v] = tracks.uv[i];
            match sample_bilinear(&depths[t], cam.width, cam.height, u, v) {
                Some(z) => out.xyz[i] = cam.unproject(&nalgebra::Vector2::new(u, v), z).into(),
                None => {
                    out.visible[i] = false;
                    out.confidence[i] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Frame with the most visible tracks; the earliest wins ties.
pub fn select_canonical_frame(tracks: &TrackTable) -> usize {
    let mut best = (0, 0);
    for t in 0..tracks.num_frames {
        let c = tracks.visible_count(t);
        if c > best.1 {
            best = (t, c);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distances closer than this count as ties, which go to the lower index.
const TIE_DIST2: f64 = 1e-12;

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(x, center);
        if d < best.1 - TIE_DIST2 || best.1.is_infinite() {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> KMeans {
    assert!(k >= 1 && points.len() >= k, "kmeans needs 1 <= k <= n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|x| nearest(x, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > TIE_DIST2 * points.len() as f64 {
            let mut r = rng.random_range(0.0..total);
            d.iter().position(|&di| {
                r -= di;
                r < 0.0
            })
            .unwrap_or(points.len() - 1)
        } else {
            0
        };
        centers.push(if total > TIE_DIST2 * points.len() as f64 { points[pick].clone() } else { centers[0].clone() });
    }
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        for (l, x) in labels.iter_mut().zip(points) {
            *l = nearest(x, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..points.len())
                    .max_by(|&a, &b| dist2(&points[a], &centers[labels[a]]).total_cmp(&dist2(&points[b], &centers[labels[b]])).then(b.cmp(&a)))
                    .unwrap();
                points[far].clone()
            };
            shift = shift.max(dist2(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if shift < tol {
            break;
        }
    }
    for (l, x) in labels.iter_mut().zip(points) {
        *l = nearest(x, &centers).0;
    }
    KMeans { labels, centers, iterations }
}

/// Per-step 3D displacements with gaps filled by the per-dimension mean.
pub fn velocity_features(tracks: &TrackTable) -> Vec<Vec<f64>> {
    let steps = tracks.num_frames.saturating_sub(1);
    let mut feats = vec![vec![0.0; 3 * steps]; tracks.num_points];
    let mut known = vec![vec![false; steps]; tracks.num_points];
    for p in 0..tracks.num_points {
        for s in 0..steps {
            if tracks.has_xyz(p, s) && tracks.has_xyz(p, s + 1) {
                let (a, b) = (tracks.xyz[tracks.idx(p, s)], tracks.xyz[tracks.idx(p, s + 1)]);
                for k in 0..3 {
                    feats[p][3 * s + k] = b[k] - a[k];
                }
                known[p][s] = true;
            }
        }
    }
    for s in 0..steps {
        let n = known.iter().filter(|k| k[s]).count();
        for k in 0..3 {
            let mean = if n == 0 { 0.0 } else { (0..tracks.num_points).filter(|&p| known[p][s]).map(|p| feats[p][3 * s + k]).sum::<f64>() / n as f64 };
            for p in 0..tracks.num_points {
                if !known[p][s] {
                    feats[p][3 * s + k] = mean;
                }
            }
        }
    }
    feats
}

/// Groups tracks by 3D velocity into `num_bases` clusters.
pub fn cluster_velocities(tracks: &TrackTable, num_bases: usize, seed: u64) -> Result<Vec<usize>> {
    if num_bases == 0 || tracks.num_points < num_bases {
        return Err(Error::InvalidConfig(format!("cannot form {num_bases} clusters from {} tracks", tracks.num_points)));
    }
    Ok(kmeans(&velocity_features(tracks), num_bases, seed, 100, 1e-6).labels)
}

/// Rigid transform minimizing `Σ wᵢ‖R srcᵢ + t − dstᵢ‖²`.
pub fn weighted_procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>], w: &[f64]) -> Result<RigidTransform> {
    assert!(src.len() == dst.len() && src.len() == w.len(), "procrustes inputs differ in length");
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || w.iter().filter(|&&x| x > 0.0).count() < 3 {
        return Err(Error::DegenerateConfiguration("need three points with positive weight".into()));
    }
    let cs = src.iter().zip(w).fold(Vector3::zeros(), |a, (p, &wi)| a + p * wi) / total;
    let cd = dst.iter().zip(w).fold(Vector3::zeros(), |a, (p, &wi)| a + p * wi) / total;
    let mut h = Matrix3::zeros();
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        h += wi * (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let (smax, smid) = {
        let mut s = [sv[0], sv[1], sv[2]];
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    };
    if !(smax > 0.0) || smid <= 1e-12 * smax {
        return Err(Error::DegenerateConfiguration(format!("cross-covariance rank < 2 (singular values {sv:?})")));
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap();
        d[(smallest, smallest)] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok(RigidTransform::new(r, cd - r * cs))
}

/// Per-cluster transforms from `t0` to every frame.
pub fn init_bases(tracks: &TrackTable, labels: &[usize], num_bases: usize, t0: usize) -> Result<MotionBases> {
    let t_count = tracks.num_frames;
    let mut bases = MotionBases::identity(num_bases, t_count, t0)?;
    for b in 0..num_bases {
        let members: Vec<usize> = (0..tracks.num_points).filter(|&p| labels[p] == b).collect();
        let mut solved: Vec<Option<RigidTransform>> = vec![None; t_count];
        solved[t0] = Some(RigidTransform::identity());
        for (tau, slot) in solved.iter_mut().enumerate() {
            if tau == t0 {
                continue;
            }
            let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
            for &p in &members {
                if tracks.has_xyz(p, t0) && tracks.has_xyz(p, tau) {
                    src.push(Vector3::from(tracks.xyz[tracks.idx(p, t0)]));
                    dst.push(Vector3::from(tracks.xyz[tracks.idx(p, tau)]));
                    w.push(tracks.confidence[tracks.idx(p, t0)] * tracks.confidence[tracks.idx(p, tau)]);
                }
            }
            *slot = weighted_procrustes(&src, &dst, &w).ok();
        }
        for tau in 0..t_count {
            let tf = match solved[tau] {
                Some(tf) => tf,
                None => interpolate_gap(&solved, tau)?,
            };
            bases.set(b, tau, &tf);
        }
    }
    Ok(bases)
}

/// Blends the nearest solved frames on either side of `tau`.
fn interpolate_gap(solved: &[Option<RigidTransform>], tau: usize) -> Result<RigidTransform> {
    let before = (0..tau).rev().find(|&t| solved[t].is_some());
    let after = (tau + 1..solved.len()).find(|&t| solved[t].is_some());
    let (a, b, s) = match (before, after) {
        (Some(a), Some(b)) => (a, b, (tau - a) as f64 / (b - a) as f64),
        (Some(a), None) => (a, a, 0.0),
        (None, Some(b)) => (b, b, 0.0),
        (None, None) => unreachable!("the canonical frame is always solved"),
    };
    let (ta, tb) = (solved[a].unwrap(), solved[b].unwrap());
    let (ra, rb) = (Rotation6D::from_matrix(&ta.rotation).to_array(), Rotation6D::from_matrix(&tb.rotation).to_array());
    let mut r = [0.0; 6];
    for k in 0..6 {
        r[k] = (1.0 - s) * ra[k] + s * rb[k];
    }
    Ok(RigidTransform::new(Rotation6D::from_array(r).to_matrix()?, ta.translation * (1.0 - s) + tb.translation * s))
}

/// Canonical position of every track: lifted at `t0`, otherwise its first lifted frame mapped back.
pub fn canonical_positions(tracks: &TrackTable, labels: &[usize], bases: &MotionBases) -> Result<Vec<Option<Vector3<f64>>>> {
    let t0 = bases.t0;
    (0..tracks.num_points)
        .map(|p| {
            if tracks.has_xyz(p, t0) {
                return Ok(Some(Vector3::from(tracks.xyz[tracks.idx(p, t0)])));
            }
            match (0..tracks.num_frames).find(|&t| tracks.has_xyz(p, t)) {
                Some(t) => Ok(Some(bases.transform(labels[p], t)?.inverse().apply(&Vector3::from(tracks.xyz[tracks.idx(p, t)])))),
                None => Ok(None),
            }
        })
        .collect()
}

/// Mean canonical position per cluster; the overall mean stands in for empty clusters.
pub fn cluster_centers(canonical: &[Option<Vector3<f64>>], labels: &[usize], num_bases: usize) -> Vec<Vector3<f64>> {
    let mut sums = vec![Vector3::zeros(); num_bases];
    let mut counts = vec![0usize; num_bases];
    let mut all = Vector3::zeros();
    let mut n = 0;
    for (c, &l) in canonical.iter().zip(labels) {
        if let Some(x) = c {
            sums[l] += x;
            counts[l] += 1;
            all += x;
            n += 1;
        }
    }
    let fallback = if n > 0 { all / n as f64 } else { Vector3::zeros() };
    sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { fallback }).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median distance of tracks to their own cluster center.
pub fn cluster_spread(canonical: &[Option<Vector3<f64>>], labels: &[usize], centers: &[Vector3<f64>]) -> f64 {
    median(canonical.iter().zip(labels).filter_map(|(c, &l)| c.map(|x| (x - centers[l]).norm())).collect())
}

/// Logits decaying linearly with distance to each cluster center.
pub fn init_coeffs(mu0: &[Vector3<f64>], centers: &[Vector3<f64>], sigma_d: f64) -> MotionCoeffs {
    let mut logits = Tensor::zeros(mu0.len(), centers.len());
    for (i, m) in mu0.iter().enumerate() {
        for (b, c) in centers.iter().enumerate() {
            logits.set(i, b, -(m - c).norm() / sigma_d);
        }
    }
    MotionCoeffs { logits }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefitConfig {
    pub steps: usize,
    pub lr_means: f64,
    pub lr_coeffs: f64,
    pub lr_bases: f64,
    /// Learning rates decay exponentially to this fraction.
    pub final_lr_factor: f64,
    pub smooth_weight: f64,
    /// Stop once the objective falls below this.
    pub tolerance: f64,
    /// A step that raises the objective above the best by this fraction is undone and the rate halved.
    pub max_rise: f64,
}

impl Default for PrefitConfig {
    fn default() -> Self {
        Self { steps: 1000, lr_means: 1e-3, lr_coeffs: 1e-2, lr_bases: 1e-2, final_lr_factor: 0.1, smooth_weight: 0.1, tolerance: 1e-9, max_rise: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefitReport {
    pub history: Vec<f64>,
    pub initial_error: f64,
    pub final_error: f64,
}

/// Mean per-entry ℓ1 distance between Gaussian trajectories and their source tracks.
pub fn trajectory_l1(means: &Tensor, sources: &[Option<usize>], motion: &MotionModel, tracks: &TrackTable) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in 0..motion.num_frames() {
        let tfs = motion.transforms_at(t)?;
        for (i, src) in sources.iter().enumerate() {
            let Some(p) = *src else { continue };
            if !tracks.has_xyz(p, t) {
                continue;
            }
            let x = tfs[i].apply(&Vector3::from_row_slice(means.row(i)));
            total += (x - Vector3::from(tracks.xyz[tracks.idx(p, t)])).abs().sum();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

struct PrefitTargets {
    per_frame: Vec<(Tensor, Vec<bool>)>,
}

fn prefit_targets(n: usize, sources: &[Option<usize>], tracks: &TrackTable) -> PrefitTargets {
    let per_frame = (0..tracks.num_frames)
        .map(|t| {
            let mut x = Tensor::zeros(n, 3);
            let mut mask = vec![false; 3 * n];
            for (i, src) in sources.iter().enumerate() {
                if let Some(p) = *src {
                    if tracks.has_xyz(p, t) {
                        x.row_mut(i).copy_from_slice(&tracks.xyz[tracks.idx(p, t)]);
                        mask[3 * i..3 * i + 3].fill(true);
                    }
                }
            }
            (x, mask)
        })
        .collect();
    PrefitTargets { per_frame }
}

/// Squared second differences of motion sequences, summed.
pub fn acceleration_penalty<'t>(vars: &MotionVars<'t>, num_frames: usize) -> Var<'t> {
    let tape = vars.transl.tape();
    if num_frames < 3 {
        return tape.scalar(0.0);
    }
    match vars.mode {
        MotionMode::Se3 => {
            let r = vars.rot6d.matmul(tape.constant(second_difference(num_frames, 6))).square().sum();
            let t = vars.transl.matmul(tape.constant(second_difference(num_frames, 3))).square().sum();
            r + t
        }
        MotionMode::TranslationBases => vars.transl.matmul(tape.constant(second_difference(num_frames, 3))).square().sum(),
        MotionMode::PerGaussian => vars.offsets.matmul(tape.constant(second_difference(num_frames, 3))).square().sum(),
    }
}

struct MotionParams {
    store: ParamStore,
    ids: [crate::grad::ParamId; 5],
}

fn motion_params(means: &Tensor, motion: &MotionModel) -> MotionParams {
    let mut store = ParamStore::new();
    let ids = [
        store.add("means", means.clone()),
        store.add("rot6d", motion.bases.rot6d.clone()),
        store.add("transl", motion.bases.transl.clone()),
        store.add("logits", motion.coeffs.logits.clone()),
        store.add("offsets", motion.offsets.clone()),
    ];
    MotionParams { store, ids }
}

fn prefit_objective<'t>(tape: &'t Tape, mp: &MotionParams, mode: MotionMode, t0: usize, targets: &PrefitTargets, smooth: f64) -> Result<Var<'t>> {
    let [m, r, tr, lg, off] = mp.ids.map(|id| tape.param(&mp.store, id));
    let vars = MotionVars { mode, t0, rot6d: r, transl: tr, logits: lg, offsets: off };
    let w = vars.weights();
    let mut residuals = Vec::new();
    let mut mask = Vec::new();
    for (t, (x, valid)) in targets.per_frame.iter().enumerate() {
        if !valid.iter().any(|&v| v) {
            continue;
        }
        let (rot, transl) = vars.transforms_at(w, t)?;
        residuals.push(rot.rigid_apply(m, transl) - tape.constant(x.clone()));
        mask.extend_from_slice(valid);
    }
    let fit = if residuals.is_empty() {
        tape.scalar(0.0)
    } else {
        // Mean over entries of the per-point ℓ1 norm.
        Var::concat_rows(&residuals).abs().masked_mean(&mask).scale(3.0)
    };
    Ok(fit + acceleration_penalty(&vars, targets.per_frame.len()).scale(smooth))
}

/// Adam refinement of canonical means, coefficients and bases against lifted tracks.
pub fn prefit(means: &mut Tensor, sources: &[Option<usize>], motion: &mut MotionModel, tracks: &TrackTable, cfg: &PrefitConfig) -> Result<PrefitReport> {
    let targets = prefit_targets(means.rows(), sources, tracks);
    let mut mp = motion_params(means, motion);
    let initial_error = trajectory_l1(means, sources, motion, tracks)?;
    let mut adam = Adam::new(&mp.store, AdamHyper::default());
    let mut history = Vec::new();
    let (lr_r, lr_t, lr_o) = match motion.mode {
        MotionMode::Se3 => (cfg.lr_bases, cfg.lr_bases, 0.0),
        MotionMode::TranslationBases => (0.0, cfg.lr_bases, 0.0),
        MotionMode::PerGaussian => (0.0, 0.0, cfg.lr_bases),
    };
    let lr_c = if motion.mode == MotionMode::PerGaussian { 0.0 } else { cfg.lr_coeffs };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut damping = 1.0;
    for step in 0..cfg.steps {
        mp.store.zero_grad();
        let tape = Tape::new();
        let mut loss = prefit_objective(&tape, &mp, motion.mode, motion.t0(), &targets, cfg.smooth_weight)?;
        let mut value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { op: "prefit objective".into() });
        }
        if let Some((b, snapshot)) = &best {
            if value > b * (1.0 + cfg.max_rise) {
                mp.store = snapshot.clone();
                adam = Adam::new(&mp.store, AdamHyper::default());
                damping *= 0.5;
                mp.store.zero_grad();
                loss = prefit_objective(&tape, &mp, motion.mode, motion.t0(), &targets, cfg.smooth_weight)?;
                value = loss.item();
            }
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, mp.store.clone()));
        }
        history.push(value);
        if value < cfg.tolerance {
            break;
        }
        tape.backward(loss, &mut mp.store)?;
        let d = |lr: f64| damping * exp_decay(lr, cfg.final_lr_factor, step, cfg.steps);
        adam.step(&mut mp.store, &[d(cfg.lr_means), d(lr_r), d(lr_t), d(lr_c), d(lr_o)]);
        let mut pinned = MotionModel {
            mode: motion.mode,
            bases: MotionBases {
                num_frames: motion.num_frames(),
                t0: motion.t0(),
                rot6d: mp.store.value(mp.ids[1]).clone(),
                transl: mp.store.value(mp.ids[2]).clone(),
            },
            coeffs: MotionCoeffs { logits: Tensor::zeros(0, 0) },
            offsets: mp.store.value(mp.ids[4]).clone(),
        };
        pinned.pin_canonical();
        mp.store.replace(mp.ids[1], pinned.bases.rot6d);
        mp.store.replace(mp.ids[2], pinned.bases.transl);
        mp.store.replace(mp.ids[4], pinned.offsets);
    }
    if let Some((b, snapshot)) = best {
        let tape = Tape::new();
        if prefit_objective(&tape, &mp, motion.mode, motion.t0(), &targets, cfg.smooth_weight)?.item() > b {
            mp.store = snapshot;
        }
    }
    *means = mp.store.value(mp.ids[0]).clone();
    motion.bases.rot6d = mp.store.value(mp.ids[1]).clone();
    motion.bases.transl = mp.store.value(mp.ids[2]).clone();
    motion.coeffs.logits = mp.store.value(mp.ids[3]).clone();
    motion.offsets = mp.store.value(mp.ids[4]).clone();
    let final_error = trajectory_l1(means, sources, motion, tracks)?;
    Ok(PrefitReport { history, initial_error, final_error })
}

/// What to initialize from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Clusters, Procrustes bases and pre-fit from lifted tracks.
    Tracks,
    /// Track-sampled means with identity bases and random coefficients.
    IdentityBases,
    /// Means from masked depth pixels; tracks unused.
    DepthOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub num_bases: usize,
    pub n_dynamic: usize,
    pub n_static: usize,
    pub mode: MotionMode,
    pub strategy: InitStrategy,
    /// Coefficient decay length as a fraction of the median cluster radius.
    pub coeff_decay: f64,
    pub initial_opacity: f64,
    pub prefit: PrefitConfig,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            num_bases: 20,
            n_dynamic: 1000,
            n_static: 1000,
            mode: MotionMode::Se3,
            strategy: InitStrategy::Tracks,
            coeff_decay: 0.1,
            initial_opacity: 0.7,
            prefit: PrefitConfig::default(),
            seed: 0,
        }
    }
}

/// Initial scene. Dynamic Gaussians come first in `gaussians`.
#[derive(Clone, Debug)]
pub struct Initialization {
    pub gaussians: GaussianSet,
    pub motion: MotionModel,
    pub tracks: TrackTable,
    pub alignments: Vec<DepthAlignment>,
    /// Aligned metric depth per frame.
    pub depths: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Source track of each dynamic Gaussian; `None` when jittered or not track-based.
    pub sources: Vec<Option<usize>>,
    pub prefit: Option<PrefitReport>,
}

/// Aligns every frame's relative depth to its metric samples.
pub fn align_sequence(seq: &Sequence) -> Result<(Vec<DepthAlignment>, Vec<Vec<f64>>)> {
    let mut alignments = Vec::with_capacity(seq.num_frames());
    let mut depths = Vec::with_capacity(seq.num_frames());
    for f in &seq.frames {
        let a = align_depth(&f.depth, seq.width, seq.height, &f.depth_refs)?;
        depths.push(a.apply(&f.depth));
        alignments.push(a);
    }
    Ok((alignments, depths))
}

fn nearest_color(image: &[[f64; 3]], cam: &Camera, x: &Vector3<f64>) -> [f64; 3] {
    match cam.project_point(x) {
        Ok((uv, _)) => {
            let px = (uv.x.round().clamp(0.0, (cam.width - 1) as f64)) as usize;
            let py = (uv.y.round().clamp(0.0, (cam.height - 1) as f64)) as usize;
            image[py * cam.width + px]
        }
        Err(_) => [0.5; 3],
    }
}

/// Root mean squared distance to the three nearest other points.
fn knn_scale(points: &[Vector3<f64>], i: usize) -> f64 {
    let mut d: Vec<f64> = points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| (q - points[i]).norm_squared()).collect();
    d.sort_by(f64::total_cmp);
    let k = d.len().min(3);
    if k == 0 {
        return 0.01;
    }
    (d[..k].iter().sum::<f64>() / k as f64).sqrt().max(1e-4)
}

fn push_gaussians(gs: &mut GaussianSet, points: &[(Vector3<f64>, [f64; 3])], opacity: f64, dynamic: bool) {
    let pos: Vec<Vector3<f64>> = points.iter().map(|p| p.0).collect();
    for (i, (x, c)) in points.iter().enumerate() {
        gs.push(*x, [1.0, 0.0, 0.0, 0.0], Vector3::repeat(knn_scale(&pos, i)), opacity, *c, dynamic);
    }
}

/// Unprojected pixels with valid depth, drawn uniformly over frames and the chosen mask side.
fn sample_depth_pixels(seq: &Sequence, depths: &[Vec<f64>], inside_mask: bool, frames: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<(Vector3<f64>, [f64; 3])> {
    let mut pool = Vec::new();
    for &t in frames {
        for (p, (&m, &d)) in seq.frames[t].mask.iter().zip(&depths[t]).enumerate() {
            if m == inside_mask && d > 0.0 {
                pool.push((t, p));
            }
        }
    }
    if pool.is_empty() {
        return Vec::new();
    }
    pool.shuffle(rng);
    (0..n)
        .map(|k| {
            let (t, p) = pool[k % pool.len()];
            let f = &seq.frames[t];
            let jitter = if k >= pool.len() { [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)] } else { [0.0; 2] };
            let uv = nalgebra::Vector2::new((p % seq.width) as f64 + jitter[0], (p / seq.width) as f64 + jitter[1]);
            (f.camera.unproject(&uv, depths[t][p]), f.image[p])
        })
        .collect()
}

/// Converts rigid bases to the chosen motion mode.
fn adapt_mode(motion: &mut MotionModel, centers: &[Vector3<f64>], means: &Tensor) -> Result<()> {
    let t_count = motion.num_frames();
    match motion.mode {
        MotionMode::Se3 => {}
        MotionMode::TranslationBases => {
            for (b, c) in centers.iter().enumerate() {
                for t in 0..t_count {
                    let tf = motion.bases.transform(b, t)?;
                    motion.bases.set(b, t, &RigidTransform::from_translation(tf.apply(c) - c));
                }
            }
        }
        MotionMode::PerGaussian => {
            let se3 = MotionModel { mode: MotionMode::Se3, ..motion.clone() };
            let mut offsets = Tensor::zeros(means.rows(), 3 * t_count);
            for t in 0..t_count {
                let tfs = se3.transforms_at(t)?;
                for (i, tf) in tfs.iter().enumerate() {
                    let m = Vector3::from_row_slice(means.row(i));
                    offsets.row_mut(i)[3 * t..3 * t + 3].copy_from_slice((tf.apply(&m) - m).as_slice());
                }
            }
            motion.offsets = offsets;
        }
    }
    Ok(())
}

/// Full initialization: alignment, lifting, canonical frame, clustering, bases, coefficients, pre-fit.
pub fn initialize(seq: &Sequence, tracks: &TrackTable, cfg: &InitConfig) -> Result<Initialization> {
    seq.validate()?;
    tracks.validate()?;
    if tracks.num_frames != seq.num_frames() {
        return Err(Error::ShapeMismatch(format!("tracks cover {} frames, sequence has {}", tracks.num_frames, seq.num_frames())));
    }
    if cfg.num_bases == 0 || cfg.n_dynamic == 0 {
        return Err(Error::InvalidConfig("num_bases and n_dynamic must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (alignments, depths) = align_sequence(seq)?;
    let cams = seq.cameras();
    let lifted = lift_tracks(tracks, &depths, &cams)?;
    let t_count = seq.num_frames();

    let (dyn_points, labels, sources, mut motion, centers) = match cfg.strategy {
        InitStrategy::DepthOnly => {
            let t0 = (0..t_count).max_by_key(|&t| (seq.frames[t].mask.iter().filter(|&&m| m).count(), std::cmp::Reverse(t))).unwrap();
            let pts = sample_depth_pixels(seq, &depths, true, &[t0], cfg.n_dynamic, &mut rng);
            let motion = random_coeff_model(pts.len(), cfg, t_count, t0, &mut rng)?;
            (pts, vec![0; tracks.num_points], vec![None; cfg.n_dynamic], motion, Vec::new())
        }
        InitStrategy::Tracks | InitStrategy::IdentityBases => {
            let t0 = select_canonical_frame(&lifted);
            let labels = cluster_velocities(&lifted, cfg.num_bases.min(lifted.num_points.max(1)), cfg.seed)?;
            let bases = if cfg.strategy == InitStrategy::Tracks {
                init_bases(&lifted, &labels, cfg.num_bases, t0)?
            } else {
                MotionBases::identity(cfg.num_bases, t_count, t0)?
            };
            let canonical = canonical_positions(&lifted, &labels, &bases)?;
            let usable: Vec<usize> = (0..lifted.num_points).filter(|&p| canonical[p].is_some()).collect();
            if usable.is_empty() {
                return Err(Error::InvalidSpec("no track could be lifted".into()));
            }
            let (pts, sources) = sample_track_means(&canonical, &usable, cfg.n_dynamic, &mut rng);
            let colored: Vec<(Vector3<f64>, [f64; 3])> = pts.iter().map(|x| (*x, nearest_color(&seq.frames[t0].image, &cams[t0], x))).collect();
            let centers = cluster_centers(&canonical, &labels, cfg.num_bases);
            let motion = if cfg.strategy == InitStrategy::Tracks {
                let sigma = (cfg.coeff_decay * cluster_spread(&canonical, &labels, &centers)).max(1e-9);
                MotionModel { mode: MotionMode::Se3, bases, coeffs: init_coeffs(&pts, &centers, sigma), offsets: Tensor::zeros(pts.len(), 3 * t_count) }
            } else {
                random_coeff_model(pts.len(), cfg, t_count, t0, &mut rng)?
            };
            (colored, labels, sources, motion, centers)
        }
    };
    if dyn_points.is_empty() {
        return Err(Error::InvalidSpec("no pixels or tracks to place dynamic Gaussians".into()));
    }
    let mut means = Tensor::zeros(dyn_points.len(), 3);
    for (i, (x, _)) in dyn_points.iter().enumerate() {
        means.row_mut(i).copy_from_slice(x.as_slice());
    }
    motion.mode = cfg.mode;
    if cfg.strategy == InitStrategy::Tracks {
        adapt_mode(&mut motion, &centers, &means)?;
    } else if cfg.mode == MotionMode::PerGaussian {
        motion.offsets = Tensor::zeros(means.rows(), 3 * t_count);
    }
    let prefit_report = if cfg.strategy == InitStrategy::Tracks && cfg.prefit.steps > 0 {
        Some(prefit(&mut means, &sources, &mut motion, &lifted, &cfg.prefit)?)
    } else {
        None
    };
    let mut gaussians = GaussianSet::new();
    let positioned: Vec<(Vector3<f64>, [f64; 3])> = dyn_points.iter().enumerate().map(|(i, (_, c))| (Vector3::from_row_slice(means.row(i)), *c)).collect();
    push_gaussians(&mut gaussians, &positioned, cfg.initial_opacity, true);
    let all_frames: Vec<usize> = (0..t_count).collect();
    let statics = sample_depth_pixels(seq, &depths, false, &all_frames, cfg.n_static, &mut rng);
    push_gaussians(&mut gaussians, &statics, cfg.initial_opacity, false);
    Ok(Initialization { gaussians, motion, tracks: lifted, alignments, depths, labels, sources, prefit: prefit_report })
}

fn random_coeff_model(n: usize, cfg: &InitConfig, t_count: usize, t0: usize, rng: &mut ChaCha8Rng) -> Result<MotionModel> {
    let mut logits = Tensor::zeros(n, cfg.num_bases);
    logits.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    Ok(MotionModel {
        mode: cfg.mode,
        bases: MotionBases::identity(cfg.num_bases, t_count, t0)?,
        coeffs: MotionCoeffs { logits },
        offsets: Tensor::zeros(n, 3 * t_count),
    })
}

/// Track positions for the dynamic means: a shuffled pass over all tracks, then jittered repeats.
fn sample_track_means(canonical: &[Option<Vector3<f64>>], usable: &[usize], n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vector3<f64>>, Vec<Option<usize>>) {
    let mut order = usable.to_vec();
    order.shuffle(rng);
    let pts: Vec<Vector3<f64>> = order.iter().map(|&p| canonical[p].unwrap()).collect();
    let spacing = if pts.len() > 1 { median((0..pts.len()).map(|i| knn_scale(&pts, i)).collect()) } else { 0.01 };
    let mut means = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for k in 0..n {
        let p = order[k % order.len()];
        let base = canonical[p].unwrap();
        if k < order.len() {
            means.push(base);
            sources.push(Some(p));
        } else {
            let j = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) * spacing;
            means.push(base + j);
            sources.push(None);
        }
    }
    (means, sources)
}

#[cfg(test)]
mod tests;
