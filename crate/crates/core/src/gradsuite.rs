//! Central-difference checks of every training loss term on a five-Gaussian fixture.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{axis_angle, look_at, Camera, RigidTransform};
use crate::grad::{check_gradients, Tensor};
use crate::motion::{MotionBases, MotionCoeffs, MotionMode, MotionModel};
use crate::sequence::TrackTable;
use crate::splat::GaussianSet;
use crate::training::{FrameTarget, QueryPlan, Scene, SceneParams, StepPlan, TrainConfig, TrainState, Trainer, TERMS};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn fixture_camera(x: f64) -> Camera {
    Camera::simple(14.0, 5.5, 5.0, look_at(Vector3::new(x, -0.2, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)), 12, 10).unwrap()
}

/// Three dynamic and two static Gaussians over three frames with random bases.
pub fn fixture_scene(rng: &mut ChaCha8Rng, num_frames: usize, mode: MotionMode) -> Scene {
    let mut gs = GaussianSet::new();
    for i in 0..5 {
        let mean = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3));
        let quat = [rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let scale = Vector3::new(rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.2..0.5));
        let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        gs.push(mean, quat, scale, rng.random_range(0.3..0.8), color, i < 3);
    }
    let mut bases = MotionBases::identity(2, num_frames, 0).unwrap();
    for b in 0..2 {
        for t in 1..num_frames {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let tr = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            bases.set(b, t, &RigidTransform::new(axis_angle(axis, rng.random_range(0.0..0.2)), tr));
        }
    }
    let logits = Tensor::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut offsets = Tensor::zeros(3, 3 * num_frames);
    if mode == MotionMode::PerGaussian {
        for r in 0..3 {
            for c in 3..3 * num_frames {
                offsets.set(r, c, rng.random_range(-0.1..0.1));
            }
        }
    }
    Scene { gaussians: gs, motion: MotionModel { mode, bases, coeffs: MotionCoeffs { logits }, offsets } }
}

pub fn fixture_trainer(seed: u64, mode: MotionMode) -> Trainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_count = 3;
    let scene = fixture_scene(&mut rng, t_count, mode);
    let cams: Vec<Camera> = (0..t_count).map(|t| fixture_camera(0.3 + 0.05 * t as f64)).collect();
    let s = 120;
    let targets = (0..t_count)
        .map(|_| {
            let image: Vec<[f64; 3]> = (0..s).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
            let depth: Vec<f64> = (0..s).map(|_| if rng.random_bool(0.9) { rng.random_range(2.5..3.5) } else { 0.0 }).collect();
            let mask: Vec<bool> = (0..s).map(|_| rng.random_bool(0.4)).collect();
            FrameTarget::new(12, 10, &image, &depth, &mask)
        })
        .collect();
    let mut tracks = TrackTable::new(4, t_count);
    for p in 0..4 {
        for t in 0..t_count {
            let i = tracks.idx(p, t);
            tracks.uv[i] = [rng.random_range(3.5..8.5), rng.random_range(3.0..7.0)];
            tracks.visible[i] = true;
            tracks.confidence[i] = 1.0;
        }
    }
    let cfg = TrainConfig {
        epochs: 2,
        query_batch: 2,
        targets_per_query: 2,
        rigidity_centers: 2,
        rigidity_knn: 2,
        num_bases: 2,
        n_dynamic: 3,
        n_static: 2,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&scene, seed);
    Trainer::new(cfg, targets, cams, tracks, scene, state).unwrap()
}

pub fn fixture_plan() -> StepPlan {
    StepPlan {
        queries: vec![QueryPlan { frame: 1, targets: vec![0, 2], centers: vec![0, 2] }, QueryPlan { frame: 0, targets: vec![2], centers: vec![1] }],
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub max_error: f64,
}

/// Checks each loss term separately on the fixture for `seed`.
pub fn check_loss_terms(seed: u64, mode: MotionMode) -> Result<Vec<TermCheck>> {
    let tr = fixture_trainer(seed, mode);
    let params = SceneParams::new(&tr.scene);
    let plan = fixture_plan();
    TERMS
        .iter()
        .enumerate()
        .map(|(k, &term)| {
            let mut store = params.store.clone();
            let r = check_gradients(&mut store, GRAD_STEP, |tape, s| {
                let sv = params.vars_in(tape, s)?;
                Ok(tr.objective_terms(&sv, &plan)?[k])
            })?;
            Ok(TermCheck { term, max_error: r.max_error })
        })
        .collect()
}
