use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::axis_angle;
use crate::synthdata::{generate, ClusterMotion, NoiseSpec, SceneSpec};

fn refs_from(rel: &[f64], width: usize, f: impl Fn(f64) -> f64) -> Vec<DepthRef> {
    (0..rel.len()).step_by(3).map(|p| DepthRef { u: (p % width) as f64, v: (p / width) as f64, depth: f(rel[p]) }).collect()
}

fn ramp(width: usize, height: usize) -> Vec<f64> {
    (0..width * height).map(|p| 1.0 + 0.01 * p as f64).collect()
}

#[test]
fn align_depth_examples() {
    let rel = ramp(8, 8);
    let a = align_depth(&rel, 8, 8, &refs_from(&rel, 8, |d| 2.0 * d)).unwrap();
    assert!((a.scale - 2.0).abs() < 1e-12 && a.shift.abs() < 1e-12 && a.rms < 1e-12);
    let a = align_depth(&rel, 8, 8, &refs_from(&rel, 8, |d| d + 5.0)).unwrap();
    assert!((a.scale - 1.0).abs() < 1e-12 && (a.shift - 5.0).abs() < 1e-12);
}

#[test]
fn align_depth_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let rel: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..3.0)).collect();
        let refs: Vec<DepthRef> = (0..40)
            .map(|_| {
                let p = rng.random_range(0..64);
                DepthRef { u: (p % 8) as f64, v: (p / 8) as f64, depth: 1.7 * rel[p] - 0.3 + rng.random_range(-0.05..0.05) }
            })
            .collect();
        let (mut m, mut rhs) = (nalgebra::Matrix2::zeros(), Vector2::zeros());
        for r in &refs {
            let d = rel[r.v as usize * 8 + r.u as usize];
            let x = Vector2::new(d, 1.0);
            m += x * x.transpose();
            rhs += x * r.depth;
        }
        let sol = m.lu().solve(&rhs).unwrap();
        let a = align_depth(&rel, 8, 8, &refs).unwrap();
        assert!((a.scale - sol[0]).abs() < 1e-9 && (a.shift - sol[1]).abs() < 1e-9);
        assert!(a.rms > 0.0);
    }
}

#[test]
fn align_depth_degenerate() {
    let rel = vec![2.0; 16];
    let r = align_depth(&rel, 4, 4, &refs_from(&rel, 4, |d| d));
    assert!(matches!(r, Err(Error::DegenerateSamples(_))));
    let r = align_depth(&rel, 4, 4, &[DepthRef { u: 0.0, v: 0.0, depth: 1.0 }]);
    assert!(matches!(r, Err(Error::DegenerateSamples(_))));
}

proptest! {
    #[test]
    fn align_residual_zero_iff_affine(scale in 0.2f64..5.0, shift in -3.0f64..3.0, bump in prop_oneof![Just(0.0), 0.001f64..0.02]) {
        let rel = ramp(6, 6);
        let mut refs = refs_from(&rel, 6, |d| scale * d + shift);
        refs[2].depth += bump;
        let a = align_depth(&rel, 6, 6, &refs).unwrap();
        prop_assert_eq!(a.rms < 1e-9, bump == 0.0);
    }
}

fn tracks_at(uv: &[[f64; 2]], num_frames: usize) -> TrackTable {
    let mut t = TrackTable::new(uv.len() / num_frames, num_frames);
    for (i, p) in uv.iter().enumerate() {
        t.uv[i] = *p;
        t.visible[i] = true;
        t.confidence[i] = 1.0;
    }
    t
}

#[test]
fn lift_on_optical_axis() {
    let cam = Camera::simple(100.0, 50.0, 50.0, RigidTransform::identity(), 100, 100).unwrap();
    let lifted = lift_tracks(&tracks_at(&[[50.0, 50.0]], 1), &[vec![1.0; 10000]], &[cam]).unwrap();
    assert_eq!(lifted.xyz[0], [0.0, 0.0, 1.0]);
}

#[test]
fn lift_matches_pointwise_oracle_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (w, h) = (24, 20);
    let k = nalgebra::Matrix3::new(30.0, 0.7, 11.0, 0.0, 28.0, 9.5, 0.0, 0.0, 1.0);
    let pose = RigidTransform::new(axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.5), Vector3::new(0.3, -0.2, 1.0));
    let cam = Camera::new(k, pose, w, h).unwrap();
    let depth: Vec<f64> = (0..w * h).map(|_| rng.random_range(1.0..4.0)).collect();
    let uv: Vec<[f64; 2]> = (0..50).map(|_| [rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)]).collect();
    let lifted = lift_tracks(&tracks_at(&uv, 1), &[depth.clone()], &[cam]).unwrap();
    for (i, [u, v]) in uv.iter().enumerate() {
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let d = |x: usize, y: usize| depth[y * w + x];
        let z = d(x0, y0) * (1.0 - fx) * (1.0 - fy) + d(x0 + 1, y0) * fx * (1.0 - fy) + d(x0, y0 + 1) * (1.0 - fx) * fy + d(x0 + 1, y0 + 1) * fx * fy;
        let ray = k.try_inverse().unwrap() * Vector3::new(*u, *v, 1.0);
        let expect = pose.inverse().apply(&(ray * z));
        let got = Vector3::from(lifted.xyz[i]);
        assert!((got - expect).norm() < 1e-12);
        let (back, _) = cam.project_point(&got).unwrap();
        assert!((back - Vector2::new(*u, *v)).norm() < 1e-6);
    }
}

#[test]
fn lift_marks_unusable_entries_invisible() {
    let cam = Camera::simple(10.0, 4.0, 4.0, RigidTransform::identity(), 8, 8).unwrap();
    let mut depth = vec![2.0; 64];
    depth[0] = 0.0;
    let lifted = lift_tracks(&tracks_at(&[[0.2, 0.2], [9.0, 3.0], [3.0, 3.0]], 1), &[depth], &[cam]).unwrap();
    assert_eq!(lifted.visible, [false, false, true]);
    assert!(lifted.xyz[0][0].is_nan() && lifted.xyz[1][0].is_nan());
}

fn visibility(counts: &[usize]) -> TrackTable {
    let p = *counts.iter().max().unwrap();
    let mut t = TrackTable::new(p, counts.len());
    for (f, &c) in counts.iter().enumerate() {
        for q in 0..c {
            let i = t.idx(q, f);
            t.visible[i] = true;
        }
    }
    t
}

#[test]
fn canonical_frame_examples() {
    assert_eq!(select_canonical_frame(&visibility(&[4, 4, 4])), 0);
    assert_eq!(select_canonical_frame(&visibility(&[1, 2, 3, 5, 2])), 3);
    assert_eq!(select_canonical_frame(&visibility(&[1, 2, 6, 3, 3, 6])), 2);
}

fn moving_groups(velocities: &[Vector3<f64>], per_group: usize, num_frames: usize, seed: u64) -> (TrackTable, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = TrackTable::new(velocities.len() * per_group, num_frames);
    let mut truth = Vec::new();
    for (g, v) in velocities.iter().enumerate() {
        for k in 0..per_group {
            let p = g * per_group + k;
            let start = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0));
            for f in 0..num_frames {
                let i = t.idx(p, f);
                t.xyz[i] = (start + v * f as f64).into();
                t.visible[i] = true;
                t.confidence[i] = 1.0;
            }
            truth.push(g);
        }
    }
    (t, truth)
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn opposite_velocities_split_exactly() {
    let (t, truth) = moving_groups(&[Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)], 12, 5, 1);
    let labels = cluster_velocities(&t, 2, 0).unwrap();
    assert!(same_partition(&labels, &truth));
    assert_eq!(labels, cluster_velocities(&t, 2, 0).unwrap());
}

#[test]
fn identical_velocities_leave_one_cluster() {
    let (t, _) = moving_groups(&[Vector3::new(0.2, 0.1, 0.0)], 10, 4, 2);
    let labels = cluster_velocities(&t, 2, 0).unwrap();
    assert!(labels.iter().all(|&l| l == labels[0]));
    assert!(cluster_velocities(&t, 1, 0).unwrap().iter().all(|&l| l == 0));
}

#[test]
fn velocity_gaps_are_mean_imputed() {
    let (mut t, _) = moving_groups(&[Vector3::new(1.0, 0.0, 0.0), Vector3::new(3.0, 0.0, 0.0)], 1, 3, 3);
    let i = t.idx(0, 2);
    t.visible[i] = false;
    let f = velocity_features(&t);
    assert_eq!(&f[0][3..6], &f[1][3..6]);
    assert!((f[0][0] - 1.0).abs() < 1e-12);
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    RigidTransform::new(axis_angle(axis, rng.random_range(-3.1..3.1)), Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
}

#[test]
fn procrustes_identity_and_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src = random_cloud(&mut rng, 10);
    let id = weighted_procrustes(&src, &src, &[1.0; 10]).unwrap();
    assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12 && id.translation.norm() < 1e-12);
    for _ in 0..50 {
        let tf = random_rigid(&mut rng);
        let dst: Vec<_> = src.iter().map(|p| tf.apply(p)).collect();
        let got = weighted_procrustes(&src, &dst, &[1.0; 10]).unwrap();
        assert!((got.rotation - tf.rotation).abs().max() < 1e-9);
        assert!((got.translation - tf.translation).norm() < 1e-9);
    }
}

#[test]
fn procrustes_ignores_zero_weight_outlier() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let src = random_cloud(&mut rng, 8);
    let tf = random_rigid(&mut rng);
    let mut dst: Vec<_> = src.iter().map(|p| tf.apply(p)).collect();
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..2.0)).collect();
    let clean = weighted_procrustes(&src, &dst, &w).unwrap();
    let mut src2 = src.clone();
    src2.push(Vector3::new(5.0, 5.0, 5.0));
    dst.push(Vector3::new(-40.0, 9.0, 3.0));
    let mut w2 = w.clone();
    w2.push(0.0);
    let with = weighted_procrustes(&src2, &dst, &w2).unwrap();
    assert!((clean.rotation - with.rotation).abs().max() < 1e-12);
    assert!((clean.translation - with.translation).norm() < 1e-12);
}

#[test]
fn procrustes_rejects_degenerate_sets() {
    let line: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
    assert!(matches!(weighted_procrustes(&line, &line, &[1.0; 5]), Err(Error::DegenerateConfiguration(_))));
    let pts = random_cloud(&mut ChaCha8Rng::seed_from_u64(1), 4);
    assert!(matches!(weighted_procrustes(&pts, &pts, &[1.0, 1.0, 0.0, 0.0]), Err(Error::DegenerateConfiguration(_))));
}

proptest! {
    #[test]
    fn procrustes_is_equivariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = random_cloud(&mut rng, 10);
        let tf = random_rigid(&mut rng);
        let dst: Vec<_> = src.iter().map(|p| tf.apply(p) + Vector3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05))).collect();
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..1.0)).collect();
        let q = random_rigid(&mut rng).rotation;
        let r = weighted_procrustes(&src, &dst, &w).unwrap().rotation;
        let qs: Vec<_> = src.iter().map(|p| q * p).collect();
        let qd: Vec<_> = dst.iter().map(|p| q * p).collect();
        let r2 = weighted_procrustes(&qs, &qd, &w).unwrap().rotation;
        prop_assert!((r2 - q * r * q.transpose()).abs().max() < 1e-9);
    }
}

#[test]
fn init_bases_static_and_translating() {
    let (t, _) = moving_groups(&[Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)], 6, 5, 7);
    let labels: Vec<usize> = (0..12).map(|p| p / 6).collect();
    let bases = init_bases(&t, &labels, 2, 0).unwrap();
    for tau in 0..5 {
        let s = bases.transform(0, tau).unwrap();
        assert!((s.rotation - Matrix3::identity()).abs().max() < 1e-9 && s.translation.norm() < 1e-9);
        let m = bases.transform(1, tau).unwrap();
        assert!((m.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!((m.translation - Vector3::new(0.1 * tau as f64, 0.0, 0.0)).norm() < 1e-9);
    }
}

#[test]
fn init_bases_interpolates_missing_frames() {
    let (mut t, _) = moving_groups(&[Vector3::new(0.1, -0.2, 0.0)], 6, 5, 8);
    for p in 0..6 {
        let i = t.idx(p, 2);
        t.visible[i] = false;
    }
    let bases = init_bases(&t, &[0; 6], 1, 0).unwrap();
    let m = bases.transform(0, 2).unwrap();
    assert!((m.translation - Vector3::new(0.2, -0.4, 0.0)).norm() < 1e-9);
}

fn zero_noise_scene(motions: Vec<ClusterMotion>, frames: usize) -> crate::synthdata::Synthetic {
    let n = motions.len();
    generate(&SceneSpec {
        n_clusters: n,
        num_frames: frames,
        width: 48,
        height: 48,
        gaussians_per_cluster: 100,
        background_gaussians: 0,
        points_per_cluster: 24,
        cluster_spacing: 1.2,
        card_size: 0.5,
        camera_path: crate::synthdata::CameraPath::Static,
        motions,
        noise: NoiseSpec::zero(),
        ..SceneSpec::default()
    })
    .unwrap()
}

#[test]
fn rotating_cluster_bases_match_generator() {
    let s = zero_noise_scene(
        vec![
            ClusterMotion::Spin { axis: [0.0, 0.0, 1.0], rate: 0.08, velocity: [0.0, 0.01, 0.0] },
            ClusterMotion::ConstantVelocity { velocity: [0.0, -0.02, 0.01], angular_velocity: [0.0; 3] },
        ],
        6,
    );
    let (_, depths) = align_sequence(&s.sequence).unwrap();
    let lifted = lift_tracks(&s.tracks, &depths, &s.sequence.cameras()).unwrap();
    for (i, x) in lifted.xyz.iter().enumerate() {
        if lifted.visible[i] {
            assert!((Vector3::from(*x) - Vector3::from(s.truth.xyz_gt[i])).norm() < 1e-6);
        }
    }
    let t0 = select_canonical_frame(&lifted);
    let bases = init_bases(&lifted, &s.truth.cluster_gt, 2, t0).unwrap();
    let gen = &s.truth.cluster_motion[0];
    for tau in 0..6 {
        let expect = gen[tau].compose(&gen[t0].inverse());
        let got = bases.transform(0, tau).unwrap();
        assert!((got.rotation - expect.rotation).abs().max() < 1e-6);
        assert!((got.translation - expect.translation).norm() < 1e-6);
    }
}

#[test]
fn coefficient_examples() {
    let centers = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(100.0, 0.0, 0.0), Vector3::new(0.0, 100.0, 0.0)];
    let c = init_coeffs(&[centers[1]], &centers, 1.0);
    assert!((c.weights_of(0)[1] - 1.0).abs() < 1e-12);
    let eq = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(-0.5, 0.75f64.sqrt(), 0.0), Vector3::new(-0.5, -(0.75f64.sqrt()), 0.0)];
    let u = init_coeffs(&[Vector3::zeros()], &eq, 0.3);
    assert!(u.weights_of(0).iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu: Vec<_> = random_cloud(&mut rng, 5);
    let cs = random_cloud(&mut rng, 4);
    let c = init_coeffs(&mu, &cs, 0.7);
    for (i, m) in mu.iter().enumerate() {
        let e: Vec<f64> = cs.iter().map(|x| (-(m - x).norm() / 0.7).exp()).collect();
        let z: f64 = e.iter().sum();
        for b in 0..4 {
            assert!((c.weights_of(i)[b] - e[b] / z).abs() < 1e-12);
        }
    }
}

fn linear_motions() -> Vec<ClusterMotion> {
    vec![
        ClusterMotion::ConstantVelocity { velocity: [-0.02, 0.01, 0.0], angular_velocity: [0.0; 3] },
        ClusterMotion::ConstantVelocity { velocity: [0.015, -0.01, 0.02], angular_velocity: [0.0; 3] },
    ]
}

fn two_cluster_init(noise: NoiseSpec, prefit_steps: usize) -> (crate::synthdata::Synthetic, Initialization) {
    let s = generate(&SceneSpec {
        motions: linear_motions(),
        num_frames: 8,
        width: 48,
        height: 48,
        gaussians_per_cluster: 100,
        background_gaussians: if noise == NoiseSpec::zero() { 0 } else { 64 },
        points_per_cluster: 24,
        noise,
        ..SceneSpec::default()
    })
    .unwrap();
    let cfg = InitConfig { num_bases: 2, n_dynamic: 48, n_static: 64, prefit: PrefitConfig { steps: prefit_steps, ..PrefitConfig::default() }, ..InitConfig::default() };
    let init = initialize(&s.sequence, &s.tracks, &cfg).unwrap();
    (s, init)
}

#[test]
fn prefit_is_stationary_on_exact_fit() {
    let (s, init) = two_cluster_init(NoiseSpec::zero(), 0);
    let mut means = init.gaussians.means.take_rows(&(0..init.motion.num_gaussians()).collect::<Vec<_>>());
    let mut motion = init.motion.clone();
    let report = prefit(&mut means, &init.sources, &mut motion, &init.tracks, &PrefitConfig { steps: 100, ..PrefitConfig::default() }).unwrap();
    assert!(report.initial_error < 1e-6, "{}", report.initial_error);
    assert!(report.final_error <= report.initial_error + 1e-6);
    assert!(report.history.windows(2).all(|w| w[1] <= w[0] + 1e-6));
    let _ = s;
}

#[test]
fn prefit_recovers_perturbed_translations() {
    let (_, init) = two_cluster_init(NoiseSpec::zero(), 0);
    let n = init.motion.num_gaussians();
    let mut means = init.gaussians.means.take_rows(&(0..n).collect::<Vec<_>>());
    let mut motion = init.motion.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in 0..2 {
        for t in 0..motion.num_frames() {
            if t != motion.t0() {
                for k in 0..3 {
                    let v = motion.bases.transl.get(b, 3 * t + k);
                    motion.bases.transl.set(b, 3 * t + k, v + rng.random_range(-0.05..0.05));
                }
            }
        }
    }
    let report = prefit(&mut means, &init.sources, &mut motion, &init.tracks, &PrefitConfig::default()).unwrap();
    assert!(report.final_error < report.initial_error / 10.0, "{report:?}");
    assert!(report.history.last().unwrap() < &report.history[0]);
    for w in report.history.windows(50) {
        assert!(w[49] <= w[0] * 1.05, "objective rose from {} to {}", w[0], w[49]);
    }
}

fn mean_acceleration(motion: &MotionModel) -> f64 {
    let d = second_difference(motion.num_frames(), 3);
    let mut total = 0.0;
    let mut n = 0;
    for b in 0..motion.bases.num_bases() {
        let row = Tensor::from_vec(1, motion.bases.transl.cols(), motion.bases.transl.row(b).to_vec());
        for s in 0..d.cols() / 3 {
            let mut acc = [0.0; 3];
            for k in 0..3 {
                acc[k] = (0..d.rows()).map(|r| row.get(0, r) * d.get(r, 3 * s + k)).sum();
            }
            total += (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn smoothness_weight_reduces_acceleration() {
    let (_, init) = two_cluster_init(NoiseSpec { depth_sigma: 0.03, track_sigma: 1.5, dropout: 0.0 }, 0);
    let n = init.motion.num_gaussians();
    let run = |smooth: f64| {
        let mut means = init.gaussians.means.take_rows(&(0..n).collect::<Vec<_>>());
        let mut motion = init.motion.clone();
        prefit(&mut means, &init.sources, &mut motion, &init.tracks, &PrefitConfig { steps: 300, smooth_weight: smooth, ..PrefitConfig::default() }).unwrap();
        mean_acceleration(&motion)
    };
    let (rough, smooth) = (run(0.0), run(0.1));
    assert!(smooth < rough, "smoothed {smooth} vs unsmoothed {rough}");
}

#[test]
fn zero_noise_initialization_is_exact() {
    let (s, init) = two_cluster_init(NoiseSpec::zero(), 1000);
    let truth: Vec<usize> = s.truth.cluster_gt.clone();
    assert!(same_partition(&init.labels, &truth));
    assert!(init.prefit.as_ref().unwrap().final_error < 1e-6);
    assert_eq!(init.gaussians.num_dynamic(), 48);
}
