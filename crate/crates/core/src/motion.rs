//! Shared SE(3) motion bases and per-Gaussian blending coefficients.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot6d_to_matrix, RigidTransform, Rotation6D};
use crate::grad::{Tensor, Var};

const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// How dynamic Gaussians move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionMode {
    /// Blended SE(3) bases.
    #[default]
    Se3,
    /// Blended translation-only bases.
    TranslationBases,
    /// Free translation per Gaussian and frame, no bases.
    PerGaussian,
}

/// `B` per-frame rigid trajectories. Frame `t` of basis `b` sits in row `b`,
/// columns `6t..6t+6` (rotation columns `a1, a2`) and `3t..3t+3` (translation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionBases {
    pub num_frames: usize,
    pub t0: usize,
    pub rot6d: Tensor,
    pub transl: Tensor,
}

impl MotionBases {
    pub fn identity(num_bases: usize, num_frames: usize, t0: usize) -> Result<Self> {
        if num_bases == 0 || num_frames < 2 || t0 >= num_frames {
            return Err(Error::InvalidConfig(format!("bases need B >= 1, T >= 2, t0 < T (got {num_bases}, {num_frames}, {t0})")));
        }
        let mut rot6d = Tensor::zeros(num_bases, 6 * num_frames);
        for b in 0..num_bases {
            for t in 0..num_frames {
                rot6d.row_mut(b)[6 * t..6 * t + 6].copy_from_slice(&IDENTITY_6D);
            }
        }
        Ok(Self { num_frames, t0, rot6d, transl: Tensor::zeros(num_bases, 3 * num_frames) })
    }

    pub fn num_bases(&self) -> usize {
        self.rot6d.rows()
    }

    pub fn rot6d_at(&self, b: usize, t: usize) -> Rotation6D {
        let r = &self.rot6d.row(b)[6 * t..6 * t + 6];
        Rotation6D::from_array([r[0], r[1], r[2], r[3], r[4], r[5]])
    }

    pub fn transl_at(&self, b: usize, t: usize) -> Vector3<f64> {
        let r = &self.transl.row(b)[3 * t..3 * t + 3];
        Vector3::new(r[0], r[1], r[2])
    }

    pub fn set(&mut self, b: usize, t: usize, tf: &RigidTransform) {
        self.rot6d.row_mut(b)[6 * t..6 * t + 6].copy_from_slice(&Rotation6D::from_matrix(&tf.rotation).to_array());
        self.transl.row_mut(b)[3 * t..3 * t + 3].copy_from_slice(tf.translation.as_slice());
    }

    /// Orthonormalized transform of basis `b` at frame `t`.
    pub fn transform(&self, b: usize, t: usize) -> Result<RigidTransform> {
        Ok(RigidTransform::new(rot6d_to_matrix(&self.rot6d_at(b, t))?, self.transl_at(b, t)))
    }

    /// Resets the canonical frame to identity.
    pub fn pin_canonical(&mut self) {
        let t = self.t0;
        for b in 0..self.num_bases() {
            self.rot6d.row_mut(b)[6 * t..6 * t + 6].copy_from_slice(&IDENTITY_6D);
            self.transl.row_mut(b)[3 * t..3 * t + 3].fill(0.0);
        }
    }
}

/// Per-Gaussian basis logits; weights are their row softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionCoeffs {
    pub logits: Tensor,
}

impl MotionCoeffs {
    pub fn uniform(n: usize, num_bases: usize) -> Self {
        Self { logits: Tensor::zeros(n, num_bases) }
    }

    pub fn weights(&self) -> Tensor {
        let mut w = self.logits.clone();
        for r in 0..w.rows() {
            softmax_in_place(w.row_mut(r));
        }
        w
    }

    pub fn weights_of(&self, i: usize) -> Vec<f64> {
        let mut w = self.logits.row(i).to_vec();
        softmax_in_place(&mut w);
        w
    }

    /// Index of the largest weight for every Gaussian.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|r| {
                let row = self.logits.row(r);
                (0..row.len()).fold(0, |best, b| if row[b] > row[best] { b } else { best })
            })
            .collect()
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Blends raw 6D rotations and translations with `w`, then orthonormalizes.
pub fn blend_bases(bases: &MotionBases, w: &[f64], t: usize) -> Result<RigidTransform> {
    assert_eq!(w.len(), bases.num_bases(), "one weight per basis");
    assert!(t < bases.num_frames);
    let mut r6 = [0.0; 6];
    let mut tr = Vector3::zeros();
    for (b, &wb) in w.iter().enumerate() {
        for (acc, v) in r6.iter_mut().zip(bases.rot6d_at(b, t).to_array()) {
            *acc += wb * v;
        }
        tr += wb * bases.transl_at(b, t);
    }
    Ok(RigidTransform::new(rot6d_to_matrix(&Rotation6D::from_array(r6))?, tr))
}

/// Moves a canonical Gaussian: `(R mu0 + t, R R0)`.
pub fn transform_gaussian(mu0: &Vector3<f64>, r0: &Matrix3<f64>, tf: &RigidTransform) -> (Vector3<f64>, Matrix3<f64>) {
    (tf.apply(mu0), tf.rotation * r0)
}

/// Positions and orientations of one Gaussian at every frame.
pub fn trajectory(mu0: &Vector3<f64>, r0: &Matrix3<f64>, bases: &MotionBases, w: &[f64]) -> Result<(Vec<Vector3<f64>>, Vec<Matrix3<f64>>)> {
    let mut pos = Vec::with_capacity(bases.num_frames);
    let mut rot = Vec::with_capacity(bases.num_frames);
    for t in 0..bases.num_frames {
        let (p, r) = if t == bases.t0 { (*mu0, *r0) } else { transform_gaussian(mu0, r0, &blend_bases(bases, w, t)?) };
        pos.push(p);
        rot.push(r);
    }
    Ok((pos, rot))
}

/// Complete motion state of the dynamic Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub mode: MotionMode,
    pub bases: MotionBases,
    pub coeffs: MotionCoeffs,
    /// N_dyn×(3T) translations, used only in per-Gaussian mode.
    pub offsets: Tensor,
}

impl MotionModel {
    pub fn num_frames(&self) -> usize {
        self.bases.num_frames
    }

    pub fn t0(&self) -> usize {
        self.bases.t0
    }

    pub fn num_gaussians(&self) -> usize {
        match self.mode {
            MotionMode::PerGaussian => self.offsets.rows(),
            _ => self.coeffs.logits.rows(),
        }
    }

    /// Rigid transform from the canonical frame to `t` for every dynamic Gaussian.
    pub fn transforms_at(&self, t: usize) -> Result<Vec<RigidTransform>> {
        let n = self.num_gaussians();
        if t == self.t0() {
            return Ok(vec![RigidTransform::identity(); n]);
        }
        match self.mode {
            MotionMode::Se3 => (0..n).map(|i| blend_bases(&self.bases, &self.coeffs.weights_of(i), t)).collect(),
            MotionMode::TranslationBases => Ok((0..n)
                .map(|i| {
                    let w = self.coeffs.weights_of(i);
                    let tr = (0..w.len()).fold(Vector3::zeros(), |acc, b| acc + w[b] * self.bases.transl_at(b, t));
                    RigidTransform::from_translation(tr)
                })
                .collect()),
            MotionMode::PerGaussian => Ok((0..n)
                .map(|i| {
                    let r = &self.offsets.row(i)[3 * t..3 * t + 3];
                    RigidTransform::from_translation(Vector3::new(r[0], r[1], r[2]))
                })
                .collect()),
        }
    }

    /// Restores identity at the canonical frame after an optimizer step.
    pub fn pin_canonical(&mut self) {
        self.bases.pin_canonical();
        let t = self.t0();
        if self.offsets.cols() >= 3 * (t + 1) {
            for r in 0..self.offsets.rows() {
                self.offsets.row_mut(r)[3 * t..3 * t + 3].fill(0.0);
            }
        }
    }

    pub fn select(&self, keep: &[bool]) -> MotionModel {
        MotionModel {
            mode: self.mode,
            bases: self.bases.clone(),
            coeffs: MotionCoeffs { logits: self.coeffs.logits.select_rows(keep) },
            offsets: if self.offsets.rows() == keep.len() { self.offsets.select_rows(keep) } else { self.offsets.clone() },
        }
    }
}

/// Tape handles for the motion parameters.
#[derive(Clone, Copy)]
pub struct MotionVars<'t> {
    pub mode: MotionMode,
    pub t0: usize,
    pub rot6d: Var<'t>,
    pub transl: Var<'t>,
    pub logits: Var<'t>,
    pub offsets: Var<'t>,
}

fn identity_rows(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, 9);
    for r in 0..n {
        t.row_mut(r).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
    t
}

impl<'t> MotionVars<'t> {
    /// Rotations (`n×9`) and translations (`n×3`) at frame `t` for the Gaussians whose weights are `w`.
    pub fn transforms_at(&self, w: Var<'t>, t: usize) -> Result<(Var<'t>, Var<'t>)> {
        let tape = w.tape();
        let n = w.rows();
        match self.mode {
            MotionMode::Se3 => {
                let r6 = w.matmul(self.rot6d.col_slice(6 * t, 6));
                let tr = w.matmul(self.transl.col_slice(3 * t, 3));
                Ok((r6.rot6d_to_rotmat()?, tr))
            }
            MotionMode::TranslationBases => Ok((tape.constant(identity_rows(n)), w.matmul(self.transl.col_slice(3 * t, 3)))),
            MotionMode::PerGaussian => Ok((tape.constant(identity_rows(n)), self.offsets.col_slice(3 * t, 3))),
        }
    }

    pub fn weights(&self) -> Var<'t> {
        self.logits.softmax_rows()
    }
}

/// `cols×(cols−2·width)` matrix taking second differences of `width`-wide frame blocks.
pub fn second_difference(num_frames: usize, width: usize) -> Tensor {
    let steps = num_frames.saturating_sub(2);
    let mut d = Tensor::zeros(num_frames * width, steps * width);
    for s in 0..steps {
        for k in 0..width {
            let col = s * width + k;
            d.set(s * width + k, col, 1.0);
            d.set((s + 1) * width + k, col, -2.0);
            d.set((s + 2) * width + k, col, 1.0);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, Camera};
    use crate::grad::{check_gradients, ParamStore, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qr_orthonormalize(r6: [f64; 6]) -> Matrix3<f64> {
        let a = nalgebra::Matrix3x2::new(r6[0], r6[3], r6[1], r6[4], r6[2], r6[5]);
        let qr = a.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut c1 = q.column(0).into_owned();
        let mut c2 = q.column(1).into_owned();
        if r[(0, 0)] < 0.0 {
            c1 = -c1;
        }
        if r[(1, 1)] < 0.0 {
            c2 = -c2;
        }
        Matrix3::from_columns(&[c1, c2, c1.cross(&c2)])
    }

    fn random_tf(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::new(axis_angle(axis, rng.random_range(-2.0..2.0)), t)
    }

    fn random_bases(rng: &mut ChaCha8Rng, b: usize, t: usize, t0: usize) -> MotionBases {
        let mut bases = MotionBases::identity(b, t, t0).unwrap();
        for bi in 0..b {
            for ti in 0..t {
                if ti != t0 {
                    bases.set(bi, ti, &random_tf(rng));
                }
            }
        }
        bases
    }

    #[test]
    fn single_basis_blend_is_that_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bases = random_bases(&mut rng, 1, 3, 0);
        let tf = blend_bases(&bases, &[1.0], 2).unwrap();
        let want = bases.transform(0, 2).unwrap();
        assert!((tf.rotation - want.rotation).abs().max() < 1e-12);
        assert!((tf.translation - want.translation).norm() < 1e-12);
    }

    #[test]
    fn identical_bases_blend_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tf = random_tf(&mut rng);
        let mut bases = MotionBases::identity(2, 2, 0).unwrap();
        bases.set(0, 1, &tf);
        bases.set(1, 1, &tf);
        let out = blend_bases(&bases, &[0.5, 0.5], 1).unwrap();
        assert!((out.rotation - tf.rotation).abs().max() < 1e-12);
        assert!((out.translation - tf.translation).norm() < 1e-12);
    }

    #[test]
    fn blend_matches_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bases = random_bases(&mut rng, 2, 2, 0);
        let w = [0.3, 0.7];
        let (a, b) = (bases.rot6d_at(0, 1).to_array(), bases.rot6d_at(1, 1).to_array());
        let mixed: [f64; 6] = std::array::from_fn(|k| w[0] * a[k] + w[1] * b[k]);
        let out = blend_bases(&bases, &w, 1).unwrap();
        assert!((out.rotation - qr_orthonormalize(mixed)).abs().max() < 1e-12);
        let tr = w[0] * bases.transl_at(0, 1) + w[1] * bases.transl_at(1, 1);
        assert!((out.translation - tr).norm() < 1e-15);
    }

    #[test]
    fn degenerate_blend_reports_rotation_error() {
        let mut bases = MotionBases::identity(2, 2, 0).unwrap();
        bases.rot6d.row_mut(0)[6..12].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        bases.rot6d.row_mut(1)[6..12].copy_from_slice(&[-1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
        assert!(matches!(blend_bases(&bases, &[0.5, 0.5], 1), Err(Error::DegenerateRotation(_))));
    }

    #[test]
    fn transform_gaussian_examples() {
        let mu = Vector3::new(1.0, 0.0, 0.0);
        let (m, r) = transform_gaussian(&mu, &Matrix3::identity(), &RigidTransform::identity());
        assert_eq!((m, r), (mu, Matrix3::identity()));
        let d = Vector3::new(0.1, 0.2, 0.3);
        let (m, r) = transform_gaussian(&mu, &Matrix3::identity(), &RigidTransform::from_translation(d));
        assert_eq!((m, r), (mu + d, Matrix3::identity()));
        let rz = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let (m, r) = transform_gaussian(&mu, &Matrix3::identity(), &RigidTransform::new(rz, Vector3::zeros()));
        assert!((m - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert_eq!(r, rz);
    }

    #[test]
    fn trajectory_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bases = random_bases(&mut rng, 3, 5, 2);
        let mu = Vector3::new(0.2, -0.4, 1.0);
        let r0 = axis_angle(Vector3::x(), 0.4);
        let (pos, rot) = trajectory(&mu, &r0, &bases, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(pos[2], mu);
        for t in 0..5 {
            let tf = bases.transform(1, t).unwrap();
            assert!((pos[t] - tf.apply(&mu)).norm() < 1e-12);
            assert!((rot[t] - tf.rotation * r0).abs().max() < 1e-12);
        }

        let still = MotionBases::identity(2, 4, 0).unwrap();
        let (pos, _) = trajectory(&mu, &r0, &still, &[0.4, 0.6]).unwrap();
        assert!(pos.iter().all(|p| *p == mu));

        let w = [0.2, 0.5, 0.3];
        let (pos, _) = trajectory(&mu, &r0, &bases, &w).unwrap();
        for (t, p) in pos.iter().enumerate() {
            let mut r6 = [0.0; 6];
            let mut tr = Vector3::zeros();
            for b in 0..3 {
                let a = bases.rot6d_at(b, t).to_array();
                for k in 0..6 {
                    r6[k] += w[b] * a[k];
                }
                tr += w[b] * bases.transl_at(b, t);
            }
            let want = qr_orthonormalize(r6) * mu + tr;
            assert!((p - want).norm() < 1e-12);
        }
    }

    #[test]
    fn canonical_frame_blends_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bases = random_bases(&mut rng, 4, 6, 3);
        for _ in 0..20 {
            let mut w: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            softmax_in_place(&mut w);
            let tf = blend_bases(&bases, &w, 3).unwrap();
            assert_eq!(tf, RigidTransform::identity());
        }
    }

    #[test]
    fn model_modes_agree_with_plain_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bases = random_bases(&mut rng, 3, 4, 1);
        let logits = Tensor::from_vec(5, 3, (0..15).map(|_| rng.random_range(-2.0..2.0)).collect());
        let mut model = MotionModel { mode: MotionMode::Se3, bases, coeffs: MotionCoeffs { logits }, offsets: Tensor::zeros(0, 0) };
        let tfs = model.transforms_at(3).unwrap();
        for (i, tf) in tfs.iter().enumerate() {
            let want = blend_bases(&model.bases, &model.coeffs.weights_of(i), 3).unwrap();
            assert!((tf.rotation - want.rotation).abs().max() < 1e-15);
        }
        model.mode = MotionMode::TranslationBases;
        let tfs = model.transforms_at(3).unwrap();
        assert!(tfs.iter().all(|tf| tf.rotation == Matrix3::identity()));
    }

    #[test]
    fn tape_transforms_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bases = random_bases(&mut rng, 3, 4, 0);
        let logits = Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
        let model = MotionModel { mode: MotionMode::Se3, bases: bases.clone(), coeffs: MotionCoeffs { logits: logits.clone() }, offsets: Tensor::zeros(4, 12) };
        let tape = crate::grad::Tape::new();
        let mv = MotionVars {
            mode: MotionMode::Se3,
            t0: 0,
            rot6d: tape.constant(bases.rot6d.clone()),
            transl: tape.constant(bases.transl.clone()),
            logits: tape.constant(logits),
            offsets: tape.constant(Tensor::zeros(4, 12)),
        };
        for t in 0..4 {
            let (r, tr) = mv.transforms_at(mv.weights(), t).unwrap();
            let plain = model.transforms_at(t).unwrap();
            for i in 0..4 {
                let rm = Matrix3::from_row_slice(r.value().row(i));
                assert!((rm - plain[i].rotation).abs().max() < 1e-12);
                assert!((Vector3::from_row_slice(tr.value().row(i)) - plain[i].translation).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn blend_transform_projection_chain_passes_grad_check() {
        let cam = Camera::simple(50.0, 20.0, 20.0, RigidTransform::from_translation(Vector3::new(0.0, 0.0, 4.0)), 40, 40).unwrap();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bases = random_bases(&mut rng, 3, 3, 0);
            let mut store = ParamStore::new();
            let r6 = store.add("rot6d", bases.rot6d.clone());
            let tr = store.add("transl", bases.transl.clone());
            let lg = store.add("logits", Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()));
            let mu = store.add("mu0", Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(-0.5..0.5)).collect()));
            let probe = Tensor::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
            let r = check_gradients(&mut store, 1e-6, |tape, s| {
                let mv = MotionVars {
                    mode: MotionMode::Se3,
                    t0: 0,
                    rot6d: tape.param(s, r6),
                    transl: tape.param(s, tr),
                    logits: tape.param(s, lg),
                    offsets: tape.constant(Tensor::zeros(4, 9)),
                };
                let (rot, t) = mv.transforms_at(mv.weights(), 2)?;
                let x = rot.rigid_apply(tape.param(s, mu), t).transform_points(&cam.extrinsics);
                Ok(x.perspective(&cam).weighted_sum(probe.clone()))
            })
            .unwrap();
            assert!(r.max_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn second_difference_of_quadratic() {
        let a = 0.25;
        let x = Tensor::from_vec(1, 5, (0..5).map(|t| a * (t * t) as f64).collect());
        let d = second_difference(5, 1);
        let tape = crate::grad::Tape::new();
        let acc = tape.constant(x).matmul(tape.constant(d)).value();
        assert!(acc.data().iter().all(|&v| (v - 2.0 * a).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0) {
            let mut a = v.clone();
            softmax_in_place(&mut a);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            let mut b: Vec<f64> = v.iter().map(|x| x + shift).collect();
            softmax_in_place(&mut b);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn trajectory_is_lipschitz_in_logits(seed in 0u64..1000, delta in 1e-7f64..1e-4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bases = random_bases(&mut rng, 3, 4, 0);
            let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mu = Vector3::new(0.3, 0.1, -0.2);
            let run = |l: &[f64]| {
                let mut w = l.to_vec();
                softmax_in_place(&mut w);
                trajectory(&mu, &Matrix3::identity(), &bases, &w).map(|(p, _)| p)
            };
            let mut bumped = logits.clone();
            bumped[1] += delta;
            if let (Ok(a), Ok(b)) = (run(&logits), run(&bumped)) {
                let moved = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
                // Bounded slope: bases are O(1), so a generous constant suffices away from degeneracy.
                prop_assert!(moved <= 1e3 * delta);
            }
        }
    }
}
