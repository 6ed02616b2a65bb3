//! Projection and compositing kernels shared by the tape ops and the plain render paths.

use std::rc::Rc;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geometry::{Camera, ZNEAR};
use crate::grad::{Backward, Tensor, Var};

pub const COV_FLOOR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of the 3σ footprint.
pub const FOOTPRINT_Q: f64 = 9.0;
const MIN_TILE: f64 = 8.0;
const MAX_TILES_PER_AXIS: f64 = 256.0;

/// Columns of a projected row: `[u, v, cxx, cxy, cyy, z]`.
pub const PROJ_COLS: usize = 6;

fn row3(t: &Tensor, r: usize) -> Vector3<f64> {
    let s = t.row(r);
    Vector3::new(s[0], s[1], s[2])
}

fn rowmat(t: &Tensor, r: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&t.row(r)[..9])
}

struct Jacobians {
    xc: Vector3<f64>,
    j: Matrix2x3<f64>,
    jw: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
}

fn jacobians(cam: &Camera, mu: &Vector3<f64>, rot: &Matrix3<f64>, scale: &Vector3<f64>) -> Jacobians {
    let k = &cam.k;
    let xc = cam.extrinsics.apply(mu);
    let (x, y, z) = (xc.x, xc.y, xc.z);
    let (fx, sk, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let j = Matrix2x3::new(fx / z, sk / z, -(fx * x + sk * y) / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let jw = j * cam.extrinsics.rotation;
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let sigma = rot * s2 * rot.transpose();
    Jacobians { xc, j, jw, sigma }
}

/// Projects one Gaussian; `None` when it lies at or behind the near plane.
pub fn project_row(cam: &Camera, mu: &Vector3<f64>, rot: &Matrix3<f64>, scale: &Vector3<f64>) -> Option<[f64; PROJ_COLS]> {
    let jc = jacobians(cam, mu, rot, scale);
    if !(jc.xc.z > ZNEAR) {
        return None;
    }
    let px = cam.pixel_from_camera(&jc.xc);
    let cov = jc.jw * jc.sigma * jc.jw.transpose() + Matrix2::identity() * COV_FLOOR;
    Some([px.x, px.y, cov[(0, 0)], cov[(0, 1)], cov[(1, 1)], jc.xc.z])
}

/// Splits a projected row into its 2D mean, covariance and depth.
pub fn unpack_row(row: &[f64]) -> (Vector2<f64>, Matrix2<f64>, f64) {
    (Vector2::new(row[0], row[1]), Matrix2::new(row[2], row[3], row[3], row[4]), row[5])
}

/// Projects every Gaussian. Culled rows are `[0, 0, 0, 0, 0, z]`.
pub fn project_all(cam: &Camera, means: &Tensor, rotmats: &Tensor, scales: &Tensor) -> Tensor {
    let n = means.rows();
    let mut out = Tensor::zeros(n, PROJ_COLS);
    for i in 0..n {
        let (mu, rot, s) = (row3(means, i), rowmat(rotmats, i), row3(scales, i));
        match project_row(cam, &mu, &rot, &s) {
            Some(r) => out.row_mut(i).copy_from_slice(&r),
            None => out.set(i, 5, cam.extrinsics.apply(&mu).z),
        }
    }
    out
}

fn project_row_backward(
    cam: &Camera,
    mu: &Vector3<f64>,
    rot: &Matrix3<f64>,
    scale: &Vector3<f64>,
    g: &[f64],
) -> (Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
    let jc = jacobians(cam, mu, rot, scale);
    let (x, y, z) = (jc.xc.x, jc.xc.y, jc.xc.z);
    if !(z > ZNEAR) {
        return (Vector3::zeros(), Matrix3::zeros(), Vector3::zeros());
    }
    let k = &cam.k;
    let (fx, sk, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let re = &cam.extrinsics.rotation;

    let gc = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
    let g_jw = 2.0 * gc * jc.jw * jc.sigma;
    let a = jc.jw.transpose() * gc * jc.jw;
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let g_rot = 2.0 * a * rot * s2;
    let m = rot.transpose() * a * rot;
    let g_scale = Vector3::new(2.0 * scale.x * m[(0, 0)], 2.0 * scale.y * m[(1, 1)], 2.0 * scale.z * m[(2, 2)]);

    let g_j = g_jw * re.transpose();
    let mut gxc = jc.j.transpose() * Vector2::new(g[0], g[1]);
    gxc.z += g[5];
    let (z2, z3) = (z * z, z * z * z);
    gxc.z += -g_j[(0, 0)] * fx / z2 - g_j[(0, 1)] * sk / z2;
    gxc.x += -g_j[(0, 2)] * fx / z2;
    gxc.y += -g_j[(0, 2)] * sk / z2;
    gxc.z += g_j[(0, 2)] * 2.0 * (fx * x + sk * y) / z3;
    gxc.z += -g_j[(1, 1)] * fy / z2;
    gxc.y += -g_j[(1, 2)] * fy / z2;
    gxc.z += g_j[(1, 2)] * 2.0 * fy * y / z3;

    (re.transpose() * gxc, g_rot, g_scale)
}

#[derive(Clone, Copy)]
struct Splat {
    index: usize,
    u: f64,
    v: f64,
    /// Inverse covariance entries `[a, b, c]` for `a dx² + 2b dx dy + c dy²`.
    conic: [f64; 3],
    opacity: f64,
}

/// Depth-sorted, tile-binned Gaussians ready for compositing at a fixed sample set.
pub struct Prepared {
    splats: Vec<Splat>,
    bins: Vec<Vec<u32>>,
    origin: [f64; 2],
    tile: f64,
    nx: usize,
    ny: usize,
}

/// One Gaussian's contribution at a sample.
#[derive(Clone, Copy, Debug)]
pub struct Contribution {
    pub index: usize,
    pub alpha: f64,
    /// Transmittance in front of this Gaussian.
    pub transmittance: f64,
    /// Whether `alpha` hit [`ALPHA_MAX`].
    pub clamped: bool,
    pub falloff: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Prepared {
    pub fn new(proj: &Tensor, opacity: &Tensor, samples: &[[f64; 2]]) -> Self {
        let mut order: Vec<usize> = (0..proj.rows())
            .filter(|&i| {
                let r = proj.row(i);
                let det = r[2] * r[4] - r[3] * r[3];
                r[5] > ZNEAR && r[2] > 0.0 && det > 0.0 && r.iter().all(|v| v.is_finite())
            })
            .collect();
        order.sort_by(|&a, &b| proj.get(a, 5).total_cmp(&proj.get(b, 5)).then(a.cmp(&b)));

        let splats: Vec<Splat> = order
            .iter()
            .map(|&i| {
                let r = proj.row(i);
                let det = r[2] * r[4] - r[3] * r[3];
                Splat { index: i, u: r[0], v: r[1], conic: [r[4] / det, -r[3] / det, r[2] / det], opacity: opacity.get(i, 0) }
            })
            .collect();

        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for s in samples.iter().filter(|s| s[0].is_finite() && s[1].is_finite()) {
            for k in 0..2 {
                lo[k] = lo[k].min(s[k]);
                hi[k] = hi[k].max(s[k]);
            }
        }
        if lo[0] > hi[0] {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let tile = MIN_TILE.max((hi[0] - lo[0]).max(hi[1] - lo[1]) / MAX_TILES_PER_AXIS);
        let nx = ((hi[0] - lo[0]) / tile).floor() as usize + 1;
        let ny = ((hi[1] - lo[1]) / tile).floor() as usize + 1;
        let mut bins = vec![Vec::new(); nx * ny];
        for (k, &i) in order.iter().enumerate() {
            let r = proj.row(i);
            let rx = 3.0 * r[2].sqrt() * (1.0 + 1e-9) + 1e-9;
            let ry = 3.0 * r[4].sqrt() * (1.0 + 1e-9) + 1e-9;
            let cell = |c: f64, o: f64, n: usize| ((c - o) / tile).floor().clamp(-1.0, n as f64);
            let (x0, x1) = (cell(r[0] - rx, lo[0], nx), cell(r[0] + rx, lo[0], nx));
            let (y0, y1) = (cell(r[1] - ry, lo[1], ny), cell(r[1] + ry, lo[1], ny));
            if x1 < 0.0 || y1 < 0.0 || x0 >= nx as f64 || y0 >= ny as f64 {
                continue;
            }
            let (x0, x1) = (x0.max(0.0) as usize, (x1 as usize).min(nx - 1));
            let (y0, y1) = (y0.max(0.0) as usize, (y1 as usize).min(ny - 1));
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    bins[cy * nx + cx].push(k as u32);
                }
            }
        }
        Prepared { splats, bins, origin: lo, tile, nx, ny }
    }

    /// Walks the front-to-back contributors at `(x, y)`; returns the final transmittance.
    pub fn walk(&self, x: f64, y: f64, mut visit: impl FnMut(&Contribution)) -> f64 {
        if !(x.is_finite() && y.is_finite()) {
            return 1.0;
        }
        let cx = (((x - self.origin[0]) / self.tile).floor().max(0.0) as usize).min(self.nx - 1);
        let cy = (((y - self.origin[1]) / self.tile).floor().max(0.0) as usize).min(self.ny - 1);
        let mut t = 1.0;
        for &k in &self.bins[cy * self.nx + cx] {
            let s = &self.splats[k as usize];
            let (dx, dy) = (x - s.u, y - s.v);
            let [a, b, c] = s.conic;
            let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
            if !(q <= FOOTPRINT_Q) {
                continue;
            }
            let falloff = (-0.5 * q).exp();
            let raw = s.opacity * falloff;
            let clamped = raw >= ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw };
            visit(&Contribution { index: s.index, alpha, transmittance: t, clamped, falloff, dx, dy });
            t *= 1.0 - alpha;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }
}

/// Composites `payload` (M×C) at each sample; output is S×(C+1) with accumulated alpha last.
pub fn composite(proj: &Tensor, opacity: &Tensor, payload: &Tensor, samples: &[[f64; 2]]) -> Tensor {
    let prep = Prepared::new(proj, opacity, samples);
    let c = payload.cols();
    let mut out = Tensor::zeros(samples.len(), c + 1);
    for (si, s) in samples.iter().enumerate() {
        let row = out.row_mut(si);
        prep.walk(s[0], s[1], |ct| {
            let w = ct.transmittance * ct.alpha;
            for (o, p) in row[..c].iter_mut().zip(payload.row(ct.index)) {
                *o += w * p;
            }
            row[c] += w;
        });
    }
    out
}

/// Pixel-center sample grid `(x, y)` in row-major order.
pub fn pixel_grid(width: usize, height: usize) -> Vec<[f64; 2]> {
    (0..height).flat_map(|y| (0..width).map(move |x| [x as f64, y as f64])).collect()
}

struct ProjectOp(Camera);

impl Backward for ProjectOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (means, rotmats, scales) = (i[0], i[1], i[2]);
        let n = means.rows();
        let mut gm = Tensor::zeros(n, 3);
        let mut gr = Tensor::zeros(n, 9);
        let mut gs = Tensor::zeros(n, 3);
        for r in 0..n {
            let gi = g.row(r);
            if gi.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (a, b, c) = project_row_backward(&self.0, &row3(means, r), &rowmat(rotmats, r), &row3(scales, r), gi);
            gm.row_mut(r).copy_from_slice(a.as_slice());
            for rr in 0..3 {
                for cc in 0..3 {
                    gr.set(r, rr * 3 + cc, b[(rr, cc)]);
                }
            }
            gs.row_mut(r).copy_from_slice(c.as_slice());
        }
        vec![Some(gm), Some(gr), Some(gs)]
    }
}

struct RasterOp(Rc<Vec<[f64; 2]>>);

impl Backward for RasterOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (gp, go, gpay, _) = raster_backward(i[0], i[1], i[2], &self.0, g);
        vec![Some(gp), Some(go), Some(gpay)]
    }
}

struct RasterAtOp;

impl Backward for RasterAtOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let samples: Vec<[f64; 2]> = (0..i[3].rows()).map(|r| [i[3].get(r, 0), i[3].get(r, 1)]).collect();
        let (gp, go, gpay, gs) = raster_backward(i[0], i[1], i[2], &samples, g);
        vec![Some(gp), Some(go), Some(gpay), Some(gs)]
    }
}

fn raster_backward(proj: &Tensor, opacity: &Tensor, payload: &Tensor, samples: &[[f64; 2]], g: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
    let (m, c) = (payload.rows(), payload.cols());
    let prep = Prepared::new(proj, opacity, samples);
    let mut gp = Tensor::zeros(m, PROJ_COLS);
    let mut go = Tensor::zeros(m, 1);
    let mut gpay = Tensor::zeros(m, c);
    let mut gsamp = Tensor::zeros(samples.len(), 2);
    let mut list = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let gs = g.row(si);
        if gs.iter().all(|&v| v == 0.0) {
            continue;
        }
        list.clear();
        prep.walk(s[0], s[1], |ct| list.push(*ct));
        let mut tail = 0.0;
        for ct in list.iter().rev() {
            let i = ct.index;
            let p = payload.row(i);
            let gdotp: f64 = gs[..c].iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + gs[c];
            let w = ct.transmittance * ct.alpha;
            for (o, gv) in gpay.row_mut(i).iter_mut().zip(&gs[..c]) {
                *o += w * gv;
            }
            let g_alpha = ct.transmittance * (gdotp - tail);
            tail = ct.alpha * gdotp + (1.0 - ct.alpha) * tail;
            if ct.clamped {
                continue;
            }
            go.row_mut(i)[0] += g_alpha * ct.falloff;
            let g_q = -0.5 * ct.alpha * g_alpha;
            let r = proj.row(i);
            let det = r[2] * r[4] - r[3] * r[3];
            let (a, b, cc) = (r[4] / det, -r[3] / det, r[2] / det);
            let (dx, dy) = (ct.dx, ct.dy);
            let gu = -g_q * (2.0 * a * dx + 2.0 * b * dy);
            let gv = -g_q * (2.0 * b * dx + 2.0 * cc * dy);
            let conic = Matrix2::new(a, b, b, cc);
            let g_conic = Matrix2::new(g_q * dx * dx, g_q * dx * dy, g_q * dx * dy, g_q * dy * dy);
            let g_cov = -(conic * g_conic * conic);
            let row = gp.row_mut(i);
            row[0] += gu;
            row[1] += gv;
            row[2] += g_cov[(0, 0)];
            row[3] += 2.0 * g_cov[(0, 1)];
            row[4] += g_cov[(1, 1)];
            let sg = gsamp.row_mut(si);
            sg[0] -= gu;
            sg[1] -= gv;
        }
    }
    (gp, go, gpay, gsamp)
}

/// Differentiable projection of world-space Gaussians (`M×3` means, `M×9` rotations, `M×3` scales) into `M×6` rows.
pub fn project_gaussians<'t>(means: Var<'t>, rotmats: Var<'t>, scales: Var<'t>, cam: &Camera) -> Var<'t> {
    let value = project_all(cam, &means.value(), &rotmats.value(), &scales.value());
    means.tape().custom(&[means, rotmats, scales], value, Box::new(ProjectOp(*cam)), "project_gaussians")
}

/// Differentiable compositing of `payload` at `samples`; output `S×(C+1)`, alpha last.
///
/// Depth order is treated as constant.
pub fn rasterize<'t>(proj: Var<'t>, opacity: Var<'t>, payload: Var<'t>, samples: Rc<Vec<[f64; 2]>>) -> Var<'t> {
    let value = composite(&proj.value(), &opacity.value(), &payload.value(), &samples);
    proj.tape().custom(&[proj, opacity, payload], value, Box::new(RasterOp(samples)), "rasterize")
}

/// [`rasterize`] at sample points that are themselves differentiable (`S×2`).
pub fn rasterize_at<'t>(proj: Var<'t>, opacity: Var<'t>, payload: Var<'t>, samples: Var<'t>) -> Var<'t> {
    let sv = samples.value();
    let pts: Vec<[f64; 2]> = (0..sv.rows()).map(|r| [sv.get(r, 0), sv.get(r, 1)]).collect();
    let value = composite(&proj.value(), &opacity.value(), &payload.value(), &pts);
    proj.tape().custom(&[proj, opacity, payload, samples], value, Box::new(RasterAtOp), "rasterize_at")
}
