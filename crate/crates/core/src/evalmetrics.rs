//! 3D end-point error, TAP-Vid tracking scores and masked image metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::splat::rasterize_frame;
use crate::synthdata::GroundTruth;
use crate::training::{predict_tracks, Scene};

/// Metric-scale thresholds of the δ3D scores.
pub const EPE_THRESHOLDS: [f64; 2] = [0.05, 0.10];
/// Pixel thresholds on 256-normalized coordinates.
pub const TAPVID_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const TAPVID_SIZE: f64 = 256.0;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epe {
    pub epe: f64,
    /// Percent of valid entries within each threshold.
    pub within: Vec<ThresholdScore>,
}

impl Epe {
    pub fn percent_at(&self, threshold: f64) -> Option<f64> {
        self.within.iter().find(|s| s.threshold == threshold).map(|s| s.percent)
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Mean Euclidean error over valid entries and the percent within each threshold.
pub fn epe_with_thresholds(pred: &[[f64; 3]], gt: &[[f64; 3]], valid: &[bool], thresholds: &[f64]) -> Result<Epe> {
    check_len("prediction and ground truth", pred.len(), gt.len())?;
    check_len("validity", valid.len(), gt.len())?;
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((p, g), _)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .collect();
    if errors.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let n = errors.len() as f64;
    let within = thresholds
        .iter()
        .map(|&threshold| ThresholdScore { threshold, percent: 100.0 * errors.iter().filter(|&&e| e < threshold).count() as f64 / n })
        .collect();
    Ok(Epe { epe: errors.iter().sum::<f64>() / n, within })
}

/// `(epe, δ@0.05, δ@0.10)`.
pub fn epe_3d(pred: &[[f64; 3]], gt: &[[f64; 3]], valid: &[bool]) -> Result<(f64, f64, f64)> {
    let e = epe_with_thresholds(pred, gt, valid, &EPE_THRESHOLDS)?;
    Ok((e.epe, e.within[0].percent, e.within[1].percent))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapVidThreshold {
    pub threshold: f64,
    pub delta: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapVid {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub per_threshold: Vec<TapVidThreshold>,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Average Jaccard, average position accuracy and occlusion accuracy, in percent.
pub fn tapvid_metrics(pred_uv: &[[f64; 2]], gt_uv: &[[f64; 2]], pred_occluded: &[bool], gt_occluded: &[bool], width: usize, height: usize) -> Result<TapVid> {
    let n = gt_uv.len();
    check_len("predicted positions", pred_uv.len(), n)?;
    check_len("predicted occlusion", pred_occluded.len(), n)?;
    check_len("ground-truth occlusion", gt_occluded.len(), n)?;
    let (sx, sy) = (TAPVID_SIZE / width as f64, TAPVID_SIZE / height as f64);
    let dist2: Vec<f64> = pred_uv.iter().zip(gt_uv).map(|(p, g)| ((p[0] - g[0]) * sx).powi(2) + ((p[1] - g[1]) * sy).powi(2)).collect();
    let gt_visible = gt_occluded.iter().filter(|o| !**o).count();
    let per_threshold: Vec<TapVidThreshold> = TAPVID_THRESHOLDS
        .iter()
        .map(|&thr| {
            let (mut within, mut tp, mut fp, mut fneg) = (0, 0, 0, 0);
            for i in 0..n {
                let close = dist2[i] < thr * thr;
                let (gv, pv) = (!gt_occluded[i], !pred_occluded[i]);
                if gv && close {
                    within += 1;
                }
                if gv && pv && close {
                    tp += 1;
                } else {
                    if pv {
                        fp += 1;
                    }
                    if gv {
                        fneg += 1;
                    }
                }
            }
            TapVidThreshold { threshold: thr, delta: percent(within, gt_visible), jaccard: percent(tp, tp + fp + fneg) }
        })
        .collect();
    let k = per_threshold.len() as f64;
    let correct = pred_occluded.iter().zip(gt_occluded).filter(|(a, b)| a == b).count();
    Ok(TapVid {
        aj: per_threshold.iter().map(|t| t.jaccard).sum::<f64>() / k,
        delta_avg: per_threshold.iter().map(|t| t.delta).sum::<f64>() / k,
        oa: percent(correct, n),
        per_threshold,
    })
}

/// `10·log10(1/MSE)` over the masked pixels, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: Option<&[bool]>) -> Result<f64> {
    check_len("images", pred.len(), gt.len())?;
    if let Some(m) = mask {
        check_len("mask", m.len(), gt.len())?;
    }
    let (mut se, mut n) = (0.0, 0usize);
    for i in 0..gt.len() {
        if mask.is_none_or(|m| m[i]) {
            se += (0..3).map(|c| (pred[i][c] - gt[i][c]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `width×height` plane; output is `(width−10)×(height−10)`.
fn filter_valid(x: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len();
    let (ow, oh) = (width + 1 - r, height + 1 - r);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..r).map(|j| k[j] * x[y * width + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..r).map(|j| k[j] * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

/// Local SSIM of one channel at every window center, `(width−10)×(height−10)`.
pub fn ssim_map(x: &[f64], y: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, width, height, &k);
    let (mx, my) = (f(x), f(y));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (sxx, syy, sxy) = (f(&xx), f(&yy), f(&xy));
    (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let (vx, vy, cxy) = (sxx[i] - a * a, syy[i] - b * b, sxy[i] - a * b);
            ((2.0 * a * b + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect()
}

/// Mean local SSIM, averaged over channels, at window centers selected by `mask`.
pub fn ssim(pred: &[[f64; 3]], gt: &[[f64; 3]], width: usize, height: usize, mask: Option<&[bool]>) -> Result<f64> {
    check_len("images", pred.len(), width * height)?;
    check_len("images", gt.len(), width * height)?;
    if let Some(m) = mask {
        check_len("mask", m.len(), width * height)?;
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!("{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let half = SSIM_WINDOW / 2;
    let ow = width + 1 - SSIM_WINDOW;
    let centers: Vec<usize> = (0..ow * (height + 1 - SSIM_WINDOW))
        .filter(|&i| mask.is_none_or(|m| m[(i / ow + half) * width + i % ow + half]))
        .collect();
    if centers.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = pred.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = gt.iter().map(|p| p[c]).collect();
        let map = ssim_map(&x, &y, width, height);
        total += centers.iter().map(|&i| map[i]).sum::<f64>() / centers.len() as f64;
    }
    Ok(total / 3.0)
}

/// Every evaluation number of a fitted scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe: f64,
    pub delta_5cm: f64,
    pub delta_10cm: f64,
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub epe_thresholds: Vec<ThresholdScore>,
    pub tapvid_thresholds: Vec<TapVidThreshold>,
    /// Scores relative to the bounding-box diagonal of the ground-truth trajectories, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative: Option<RelativeScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeScores {
    pub bbox_diagonal: f64,
    /// EPE as a percent of the diagonal.
    pub epe_percent: f64,
    /// Percent of entries within 5% of the diagonal.
    pub delta_5pct: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let pct = [self.delta_5cm, self.delta_10cm, self.aj, self.delta_avg, self.oa];
        if pct.iter().any(|p| !(0.0..=100.0).contains(p)) || !(self.epe >= 0.0) || !(-1.0..=1.0).contains(&self.ssim) {
            return Err(Error::InvalidSpec("metric report values out of range".into()));
        }
        Ok(())
    }
}

/// Scores a fitted scene against generator ground truth: held-out trajectories and novel views.
pub fn evaluate(scene: &Scene, cams: &[Camera], truth: &GroundTruth) -> Result<MetricReport> {
    let t_count = truth.num_frames;
    let p = truth.num_eval_points();
    check_len("cameras", cams.len(), t_count)?;
    check_len("ground-truth trajectories", truth.eval_xyz.len(), p * t_count)?;
    check_len("ground-truth pixels", truth.eval_uv.len(), p * t_count)?;
    check_len("ground-truth occlusion", truth.eval_occluded.len(), p * t_count)?;
    check_len("query frames", truth.eval_query.len(), p)?;
    let queries: Vec<(usize, [f64; 2])> = truth.eval_query.iter().enumerate().map(|(i, &t)| (t, truth.eval_uv[i * t_count + t])).collect();
    if queries.iter().any(|q| q.0 >= t_count) {
        return Err(Error::ShapeMismatch("query frame out of range".into()));
    }
    let pred = predict_tracks(scene, cams, &queries)?;
    let valid = vec![true; p * t_count];
    let e = epe_with_thresholds(&pred.xyz, &truth.eval_xyz, &valid, &EPE_THRESHOLDS)?;
    let (w, h) = (cams[0].width, cams[0].height);
    let tv = tapvid_metrics(&pred.uv, &truth.eval_uv, &pred.occluded, &truth.eval_occluded, w, h)?;
    if truth.novel_views.is_empty() {
        return Err(Error::ShapeMismatch("no novel views to score".into()));
    }
    let (mut ps, mut ss) = (0.0, 0.0);
    for view in &truth.novel_views {
        if view.frame >= t_count {
            return Err(Error::ShapeMismatch("novel view frame out of range".into()));
        }
        let out = rasterize_frame(&scene.gaussians, &scene.poses_at(view.frame)?, &view.camera)?;
        ps += psnr(&out.image, &view.image, None)?;
        ss += ssim(&out.image, &view.image, view.camera.width, view.camera.height, None)?;
    }
    let nv = truth.novel_views.len() as f64;
    let diag = truth.bbox_diagonal;
    let relative = (diag > 0.0).then(|| -> Result<RelativeScores> {
        let r = epe_with_thresholds(&pred.xyz, &truth.eval_xyz, &valid, &[0.05 * diag])?;
        Ok(RelativeScores { bbox_diagonal: diag, epe_percent: 100.0 * e.epe / diag, delta_5pct: r.within[0].percent })
    });
    Ok(MetricReport {
        epe: e.epe,
        delta_5cm: e.within[0].percent,
        delta_10cm: e.within[1].percent,
        aj: tv.aj,
        delta_avg: tv.delta_avg,
        oa: tv.oa,
        psnr: ps / nv,
        ssim: ss / nv,
        epe_thresholds: e.within,
        tapvid_thresholds: tv.per_threshold,
        relative: relative.transpose()?,
    })
}
