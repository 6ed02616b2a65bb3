//! Brute-force per-pixel compositing oracle and random scene generator.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::geometry::{look_at, quat_to_matrix, Camera, RigidTransform};
use splat4d::splat::GaussianSet;

pub struct Scene {
    pub gs: GaussianSet,
    pub poses_t: Vec<RigidTransform>,
    pub poses_target: Vec<RigidTransform>,
    pub cam: Camera,
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let r = splat4d::geometry::axis_angle(axis, rng.random_range(-rot..rot));
    let t = Vector3::new(rng.random_range(-trans..trans), rng.random_range(-trans..trans), rng.random_range(-trans..trans));
    RigidTransform::new(r, t)
}

/// Up to 10 Gaussians, image up to 32×32, camera looking at the origin.
pub fn random_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=10);
    let (w, h) = (rng.random_range(8..=32), rng.random_range(8..=32));
    let f = rng.random_range(15.0..40.0);
    let eye = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-4.0..-2.5));
    let cam = Camera::simple(f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)), w, h).unwrap();
    let mut gs = GaussianSet::new();
    let mut poses_t = Vec::new();
    let mut poses_target = Vec::new();
    for _ in 0..n {
        let mean = Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
        let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let scale = Vector3::new(rng.random_range(0.03..0.4), rng.random_range(0.03..0.4), rng.random_range(0.03..0.4));
        let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        gs.push(mean, q, scale, rng.random_range(0.05..0.99), color, rng.random_bool(0.7));
        poses_t.push(random_pose(&mut rng, 0.3, 0.2));
        poses_target.push(random_pose(&mut rng, 0.5, 0.5));
    }
    Scene { gs, poses_t, poses_target, cam }
}

struct Flat {
    uv: Vector2<f64>,
    inv: Matrix2<f64>,
    z: f64,
    opacity: f64,
    color: [f64; 3],
    mean: Vector3<f64>,
    target: Vector3<f64>,
    dynamic: bool,
}

fn pixel_of(cam: &Camera, xc: &Vector3<f64>) -> Vector2<f64> {
    let p = cam.k * xc;
    Vector2::new(p.x / p.z, p.y / p.z)
}

/// Projection Jacobian by central differences.
fn numeric_jacobian(cam: &Camera, xc: &Vector3<f64>) -> Matrix2x3<f64> {
    let mut j = Matrix2x3::zeros();
    let h = 1e-6 * xc.z;
    for k in 0..3 {
        let mut a = *xc;
        let mut b = *xc;
        a[k] += h;
        b[k] -= h;
        let d = (pixel_of(cam, &a) - pixel_of(cam, &b)) / (2.0 * h);
        j[(0, k)] = d.x;
        j[(1, k)] = d.y;
    }
    j
}

fn flatten(s: &Scene) -> Vec<Flat> {
    let mut out = Vec::new();
    for i in 0..s.gs.len() {
        let q = s.gs.quats.row(i);
        let r0 = quat_to_matrix([q[0], q[1], q[2], q[3]]);
        let pose = &s.poses_t[i];
        let mean = pose.rotation * s.gs.mean(i) + pose.translation;
        let rot: Matrix3<f64> = pose.rotation * r0;
        let xc = s.cam.extrinsics.rotation * mean + s.cam.extrinsics.translation;
        if xc.z <= 1e-4 {
            continue;
        }
        let sc = s.gs.scale(i);
        let sigma3 = rot * Matrix3::from_diagonal(&sc.component_mul(&sc)) * rot.transpose();
        let jw = numeric_jacobian(&s.cam, &xc) * s.cam.extrinsics.rotation;
        let cov = jw * sigma3 * jw.transpose() + Matrix2::identity() * 0.3;
        out.push(Flat {
            uv: pixel_of(&s.cam, &xc),
            inv: cov.try_inverse().unwrap(),
            z: xc.z,
            opacity: 1.0 / (1.0 + (-s.gs.opacity_logits.get(i, 0)).exp()),
            color: s.gs.color(i),
            mean,
            target: s.poses_target[i].rotation * s.gs.mean(i) + s.poses_target[i].translation,
            dynamic: s.gs.dynamic[i],
        });
    }
    // Storage order is the tie-break, so keep it stable.
    out
}

pub struct OraclePixel {
    pub image: [f64; 3],
    pub depth: f64,
    pub alpha: f64,
    /// Alpha-weighted world position at the query time over all Gaussians.
    pub world: [f64; 3],
    /// Alpha-weighted target position over dynamic Gaussians, and its alpha.
    pub track: [f64; 3],
    pub track_alpha: f64,
}

fn composite_one(gs: &[&Flat], x: f64, y: f64, mut add: impl FnMut(&Flat, f64)) -> f64 {
    let mut sorted: Vec<&&Flat> = gs.iter().collect();
    sorted.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap());
    let mut t = 1.0;
    for g in sorted {
        let d = Vector2::new(x, y) - g.uv;
        let q = (d.transpose() * g.inv * d)[(0, 0)];
        if q > 9.0 {
            continue;
        }
        let a = (g.opacity * (-0.5 * q).exp()).min(0.999);
        add(g, t * a);
        t *= 1.0 - a;
        if t < 1e-4 {
            break;
        }
    }
    1.0 - t
}

pub fn oracle_render(s: &Scene) -> Vec<OraclePixel> {
    let flat = flatten(s);
    let all: Vec<&Flat> = flat.iter().collect();
    let dynamic: Vec<&Flat> = flat.iter().filter(|g| g.dynamic).collect();
    let mut out = Vec::new();
    for y in 0..s.cam.height {
        for x in 0..s.cam.width {
            let (xf, yf) = (x as f64, y as f64);
            let mut px = OraclePixel { image: [0.0; 3], depth: 0.0, alpha: 0.0, world: [0.0; 3], track: [0.0; 3], track_alpha: 0.0 };
            let mut wsum = 0.0;
            composite_one(&all, xf, yf, |g, w| {
                for k in 0..3 {
                    px.image[k] += w * g.color[k];
                    px.world[k] += w * g.mean[k];
                }
                px.depth += w * g.z;
                wsum += w;
            });
            px.alpha = wsum;
            let mut tsum = 0.0;
            composite_one(&dynamic, xf, yf, |g, w| {
                for k in 0..3 {
                    px.track[k] += w * g.target[k];
                }
                tsum += w;
            });
            px.track_alpha = tsum;
            out.push(px);
        }
    }
    out
}
