mod support;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splat4d::geometry::{Camera, RigidTransform};
use splat4d::splat::{project_track_map, rasterize_frame, rasterize_tracks, GaussianSet, TrackMap, VALID_ALPHA};
use support::oracle::{oracle_render, random_scene};

#[test]
fn matches_brute_force_oracle() {
    let mut worst: f64 = 0.0;
    let mut covered = 0;
    for seed in 0..50 {
        let s = random_scene(seed);
        let fast = rasterize_frame(&s.gs, &s.poses_t, &s.cam).unwrap();
        let tracks = rasterize_tracks(&s.gs, &s.poses_t, &s.poses_target, &s.cam).unwrap();
        for (p, o) in oracle_render(&s).iter().enumerate() {
            let mut err: f64 = (fast.depth[p] - o.depth).abs().max((fast.alpha[p] - o.alpha).abs());
            for k in 0..3 {
                err = err.max((fast.image[p][k] - o.image[k]).abs());
                if o.alpha >= VALID_ALPHA {
                    err = err.max((fast.track_world[p][k] - o.world[k] / o.alpha).abs());
                }
                if o.track_alpha >= VALID_ALPHA {
                    err = err.max((tracks.xyz[p][k] - o.track[k] / o.track_alpha).abs());
                }
            }
            err = err.max((tracks.alpha[p] - o.track_alpha).abs());
            worst = worst.max(err);
            covered += usize::from(o.alpha > 0.1);
        }
    }
    assert!(covered > 2000, "scenes barely cover the images ({covered} pixels)");
    assert!(worst < 1e-6, "max abs error {worst:e}");
}

#[test]
fn compositing_weights_equal_alpha_and_stay_in_unit_range() {
    for seed in 100..120 {
        let s = random_scene(seed);
        let out = rasterize_frame(&s.gs, &s.poses_t, &s.cam).unwrap();
        for (p, o) in oracle_render(&s).iter().enumerate() {
            assert!((0.0..=1.0).contains(&out.alpha[p]));
            assert!((out.alpha[p] - o.alpha).abs() < 1e-9);
        }
    }
}

#[test]
fn storage_order_does_not_change_output() {
    for seed in 200..220 {
        let s = random_scene(seed);
        let mut perm: Vec<usize> = (0..s.gs.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let gs2 = s.gs.take(&perm);
        let poses2: Vec<RigidTransform> = perm.iter().map(|&i| s.poses_t[i]).collect();
        let a = rasterize_frame(&s.gs, &s.poses_t, &s.cam).unwrap();
        let b = rasterize_frame(&gs2, &poses2, &s.cam).unwrap();
        for p in 0..a.alpha.len() {
            assert!((a.alpha[p] - b.alpha[p]).abs() < 1e-9);
            assert!((a.depth[p] - b.depth[p]).abs() < 1e-9);
            for k in 0..3 {
                assert!((a.image[p][k] - b.image[p][k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn two_gaussians_composite_front_to_back() {
    let cam = Camera::simple(30.0, 8.0, 8.0, RigidTransform::identity(), 17, 17).unwrap();
    let mut gs = GaussianSet::new();
    gs.push(Vector3::new(0.0, 0.0, 2.0), [1.0, 0.0, 0.0, 0.0], Vector3::repeat(0.3), 0.6, [1.0, 0.0, 0.0], true);
    gs.push(Vector3::new(0.0, 0.0, 1.0), [1.0, 0.0, 0.0, 0.0], Vector3::repeat(0.1), 0.7, [0.0, 0.0, 1.0], true);
    let out = rasterize_frame(&gs, &[RigidTransform::identity(); 2], &cam).unwrap();
    let p = 8 * 17 + 8;
    let (a1, a2) = (0.7, 0.6);
    assert!((out.image[p][2] - a1).abs() < 1e-12);
    assert!((out.image[p][0] - (1.0 - a1) * a2).abs() < 1e-12);
    assert!((out.depth[p] - (a1 * 1.0 + (1.0 - a1) * a2 * 2.0)).abs() < 1e-12);
}

fn big_gaussian_scene(dynamic: bool) -> (GaussianSet, Camera) {
    let cam = Camera::simple(20.0, 8.0, 8.0, RigidTransform::identity(), 16, 16).unwrap();
    let mut gs = GaussianSet::new();
    gs.push(Vector3::new(0.1, -0.1, 3.0), [1.0, 0.0, 0.0, 0.0], Vector3::new(2.0, 2.0, 0.01), 0.999, [0.5; 3], dynamic);
    (gs, cam)
}

#[test]
fn track_map_at_same_time_is_current_position() {
    let (gs, cam) = big_gaussian_scene(true);
    let id = [RigidTransform::identity()];
    let map = rasterize_tracks(&gs, &id, &id, &cam).unwrap();
    let p = 8 * 16 + 8;
    assert!(map.valid[p]);
    for k in 0..3 {
        assert!((map.xyz[p][k] - gs.mean(0)[k]).abs() < 1e-12);
    }
}

#[test]
fn rigid_translation_shifts_track_map() {
    let s = random_scene(7);
    let delta = Vector3::new(0.3, -0.1, 0.25);
    let shifted: Vec<RigidTransform> = s.poses_t.iter().map(|p| RigidTransform::new(p.rotation, p.translation + delta)).collect();
    let base = rasterize_tracks(&s.gs, &s.poses_t, &s.poses_t, &s.cam).unwrap();
    let moved = rasterize_tracks(&s.gs, &s.poses_t, &shifted, &s.cam).unwrap();
    for p in 0..base.xyz.len() {
        assert_eq!(base.valid[p], moved.valid[p]);
        if base.valid[p] {
            for k in 0..3 {
                assert!((moved.xyz[p][k] - base.xyz[p][k] - delta[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn static_gaussians_do_not_enter_track_maps() {
    let (gs, cam) = big_gaussian_scene(false);
    let id = [RigidTransform::identity()];
    let map = rasterize_tracks(&gs, &id, &id, &cam).unwrap();
    assert!(map.alpha.iter().all(|&a| a == 0.0));
}

fn single_point_map(p: Vector3<f64>) -> TrackMap {
    TrackMap { xyz: vec![[p.x, p.y, p.z]], alpha: vec![1.0], valid: vec![true] }
}

#[test]
fn project_track_map_examples() {
    let cam = Camera::simple(100.0, 50.0, 50.0, RigidTransform::identity(), 100, 100).unwrap();
    let c = project_track_map(&single_point_map(Vector3::new(0.0, 0.0, 2.0)), &cam);
    assert_eq!(c.uv[0], [50.0, 50.0]);
    assert_eq!(c.depth[0], 2.0);

    let dx = 0.2;
    let moved = Camera::simple(100.0, 50.0, 50.0, RigidTransform::from_translation(Vector3::new(-dx, 0.0, 0.0)), 100, 100).unwrap();
    let c = project_track_map(&single_point_map(Vector3::new(0.0, 0.0, 2.0)), &moved);
    assert!((c.uv[0][0] - (50.0 - 100.0 * dx / 2.0)).abs() < 1e-12);

    let behind = project_track_map(&single_point_map(Vector3::new(0.0, 0.0, -1.0)), &cam);
    assert!(!behind.valid[0]);
}

#[test]
fn project_track_map_matches_pointwise_projection() {
    let s = random_scene(3);
    let map = rasterize_tracks(&s.gs, &s.poses_t, &s.poses_target, &s.cam).unwrap();
    let k = Matrix3::new(30.0, 0.5, 10.0, 0.0, 28.0, 12.0, 0.0, 0.0, 1.0);
    let cam2 = Camera::new(k, s.cam.extrinsics, 20, 20).unwrap();
    let c = project_track_map(&map, &cam2);
    for p in 0..map.xyz.len() {
        if !c.valid[p] {
            continue;
        }
        let (uv, d) = cam2.project_point(&Vector3::from(map.xyz[p])).unwrap();
        assert!((uv.x - c.uv[p][0]).abs() < 1e-9 && (uv.y - c.uv[p][1]).abs() < 1e-9);
        assert!((d - c.depth[p]).abs() < 1e-12);
    }
}
