mod common;
#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat4d::evalmetrics::{epe_3d, evaluate, psnr, ssim, tapvid_metrics, MetricReport};
use splat4d::geometry::{axis_angle, RigidTransform};
use splat4d::gradsuite::{check_loss_terms, GRAD_TOLERANCE};
use splat4d::init::{init_bases, initialize, select_canonical_frame, weighted_procrustes, InitConfig, PrefitConfig};
use splat4d::motion::MotionMode;
use splat4d::splat::{rasterize_frame, rasterize_tracks, VALID_ALPHA};
use splat4d::synthdata::{generate, CameraPath, ClusterMotion, NoiseSpec, SceneSpec, Synthetic};
use splat4d::training::{prepare, Ablation, FitConfig, Trainer};
use splat4d_cli::commands::{cmd_fit, cmd_generate, FitArgs, CHECKPOINT_FILE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rasterizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let s = oracle::random_scene(seed);
        let fast = rasterize_frame(&s.gs, &s.poses_t, &s.cam).unwrap();
        let tracks = rasterize_tracks(&s.gs, &s.poses_t, &s.poses_target, &s.cam).unwrap();
        for (p, o) in oracle::oracle_render(&s).iter().enumerate() {
            let mut err: f64 = (fast.depth[p] - o.depth).abs().max((fast.alpha[p] - o.alpha).abs()).max((tracks.alpha[p] - o.track_alpha).abs());
            for k in 0..3 {
                err = err.max((fast.image[p][k] - o.image[k]).abs());
                if o.alpha >= VALID_ALPHA {
                    err = err.max((fast.track_world[p][k] - o.world[k] / o.alpha).abs());
                }
                if o.track_alpha >= VALID_ALPHA {
                    err = err.max((tracks.xyz[p][k] - o.track[k] / o.track_alpha).abs());
                }
            }
            worst = worst.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-6 && secs < 5.0, format!("50 scenes, max abs error {worst:.2e}, {secs:.2} s"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for seed in 0..20 {
        for t in check_loss_terms(seed, MotionMode::Se3).unwrap() {
            worst = worst.max(t.max_error);
            if t.max_error >= GRAD_TOLERANCE {
                failing.push(format!("{}@{seed}", t.term));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(failing.is_empty() && secs < 60.0, format!("20 seeds, worst relative error {worst:.2e}, failing {failing:?}, {secs:.1} s"))
}

fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    2.0 * ((a - b).norm() / 8f64.sqrt()).min(1.0).asin()
}

fn procrustes_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut rot_err, mut trans_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let src: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let tf = RigidTransform::new(axis_angle(axis, rng.random_range(-3.1..3.1)), Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)));
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| tf.apply(p)).collect();
        let got = weighted_procrustes(&src, &dst, &[1.0; 10]).unwrap();
        rot_err = rot_err.max(rotation_angle(&got.rotation, &tf.rotation));
        trans_err = trans_err.max((got.translation - tf.translation).norm());
    }
    let src: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    let tf = RigidTransform::new(axis_angle(Vector3::new(0.3, -1.0, 0.2), 0.9), Vector3::new(0.5, 1.0, -2.0));
    let mut dst: Vec<Vector3<f64>> = src.iter().map(|p| tf.apply(p)).collect();
    let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.1..2.0)).collect();
    let clean = weighted_procrustes(&src, &dst, &w).unwrap();
    let mut src2 = src.clone();
    src2.push(Vector3::new(4.0, 4.0, 4.0));
    dst.push(Vector3::new(-30.0, 7.0, 2.0));
    let mut w2 = w;
    w2.push(0.0);
    let with = weighted_procrustes(&src2, &dst, &w2).unwrap();
    let outlier_exact = clean == with;
    outcome(
        rot_err < 1e-8 && trans_err < 1e-8 && outlier_exact,
        format!("100 transforms, rotation error {rot_err:.1e} rad, translation error {trans_err:.1e}, zero-weight outlier ignored exactly: {outlier_exact}"),
    )
}

/// Best agreement between two labelings over relabelings of `a`.
fn agreement_up_to_permutation(a: &[usize], b: &[usize], k: usize) -> usize {
    fn search(perm: &mut Vec<usize>, used: &mut Vec<bool>, a: &[usize], b: &[usize], k: usize) -> usize {
        if perm.len() == k {
            return a.iter().zip(b).filter(|(x, y)| perm[**x] == **y).count();
        }
        let mut best = 0;
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                perm.push(c);
                best = best.max(search(perm, used, a, b, k));
                perm.pop();
                used[c] = false;
            }
        }
        best
    }
    search(&mut Vec::new(), &mut vec![false; k], a, b, k)
}

fn initialization_pipeline() -> Outcome {
    let syn = generate(&SceneSpec {
        n_clusters: 3,
        num_frames: 8,
        width: 48,
        height: 48,
        gaussians_per_cluster: 100,
        background_gaussians: 0,
        points_per_cluster: 24,
        cluster_spacing: 1.0,
        card_size: 0.4,
        camera_path: CameraPath::Static,
        motions: vec![
            ClusterMotion::ConstantVelocity { velocity: [-0.02, 0.01, 0.0], angular_velocity: [0.0; 3] },
            ClusterMotion::ConstantVelocity { velocity: [0.015, -0.01, 0.02], angular_velocity: [0.0; 3] },
            ClusterMotion::ConstantVelocity { velocity: [0.0, 0.025, -0.01], angular_velocity: [0.0; 3] },
        ],
        noise: NoiseSpec::zero(),
        ..SceneSpec::default()
    })
    .unwrap();
    let cfg = InitConfig { num_bases: 3, n_dynamic: 72, n_static: 0, prefit: PrefitConfig { steps: 1000, ..PrefitConfig::default() }, ..InitConfig::default() };
    let init = initialize(&syn.sequence, &syn.tracks, &cfg).unwrap();
    let n = init.labels.len();
    let agree = agreement_up_to_permutation(&init.labels, &syn.truth.cluster_gt, 3);

    let t0 = select_canonical_frame(&init.tracks);
    let bases = init_bases(&init.tracks, &init.labels, 3, t0).unwrap();
    let mut base_err: f64 = 0.0;
    for (k, gen) in syn.truth.cluster_motion.iter().enumerate() {
        let p = syn.truth.cluster_gt.iter().position(|&c| c == k).unwrap();
        let b = init.labels[p];
        for tau in 0..syn.truth.num_frames {
            let expect = gen[tau].compose(&gen[t0].inverse());
            let got = bases.transform(b, tau).unwrap();
            base_err = base_err.max((got.rotation - expect.rotation).abs().max()).max((got.translation - expect.translation).norm());
        }
    }
    let l1 = init.prefit.as_ref().map_or(f64::INFINITY, |r| r.final_error);
    outcome(agree == n && base_err < 1e-6 && l1 < 1e-6, format!("labels {agree}/{n}, basis error {base_err:.1e}, prefit l1 {l1:.1e}"))
}

const FIT_EPOCHS: usize = 100;

fn fit_config(seed: u64, ablate: Option<Ablation>) -> FitConfig {
    let mut cfg = FitConfig { seed, ablate, ..FitConfig::default() };
    cfg.train.epochs = FIT_EPOCHS;
    cfg.train.num_bases = 2;
    cfg.train.n_dynamic = 300;
    cfg.train.n_static = 200;
    cfg
}

struct Fit {
    trainer: Trainer,
    report: MetricReport,
    secs: f64,
}

fn fit(syn: &Synthetic, seed: u64, ablate: Option<Ablation>) -> Fit {
    let start = Instant::now();
    let (mut trainer, _) = prepare(&syn.sequence, &syn.tracks, &fit_config(seed, ablate)).unwrap();
    trainer.run(|_, _| Ok(())).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&trainer.scene, &trainer.cams, &syn.truth).unwrap();
    Fit { trainer, report, secs }
}

fn epe_percent(r: &MetricReport) -> f64 {
    r.relative.as_ref().unwrap().epe_percent
}

fn end_to_end(f: &Fit) -> Outcome {
    let rel = f.report.relative.as_ref().unwrap();
    outcome(
        rel.epe_percent < 3.0 && rel.delta_5pct > 90.0 && f.report.psnr > 25.0 && f.secs < 900.0,
        format!("EPE {:.3}% of diagonal, delta@5% {:.1}%, PSNR {:.2} dB, {:.0} s", rel.epe_percent, rel.delta_5pct, f.report.psnr, f.secs),
    )
}

fn ablation_ordering(syn: &Synthetic, full_seed0: f64) -> Outcome {
    let mean = |ablate: Option<Ablation>| {
        let mut total = 0.0;
        for seed in 0..3 {
            total += if seed == 0 && ablate.is_none() { full_seed0 } else { epe_percent(&fit(syn, seed, ablate).report) };
        }
        total / 3.0
    };
    let full = mean(None);
    let transl = mean(Some(Ablation::TranslBases));
    let no_init = mean(Some(Ablation::NoInit));
    let no_tracks = mean(Some(Ablation::NoTracks));
    outcome(
        full < transl && transl <= no_init && no_init < no_tracks,
        format!("mean EPE %: full {full:.3} < transl-bases {transl:.3} <= no-init {no_init:.3} < no-tracks {no_tracks:.3}"),
    )
}

fn coefficient_structure() -> Outcome {
    let spec = SceneSpec { noise: NoiseSpec::zero(), ..SceneSpec::default() };
    let syn = generate(&spec).unwrap();
    let f = fit(&syn, 0, None);
    let scene = &f.trainer.scene;
    let t0 = scene.motion.t0();
    let truth = &syn.truth;
    let anchors: Vec<(Vector3<f64>, usize)> = truth
        .gaussian_labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|k| (truth.cluster_motion[k][t0].apply(&Vector3::from_fn(|r, _| truth.gaussians.means.get(i, r))), k)))
        .collect();
    let nd = scene.num_dynamic();
    let gt: Vec<usize> = (0..nd)
        .map(|i| {
            let x = Vector3::from_fn(|r, _| scene.gaussians.means.get(i, r));
            anchors.iter().min_by(|a, b| (a.0 - x).norm().total_cmp(&(b.0 - x).norm())).unwrap().1
        })
        .collect();
    let labels = scene.motion.coeffs.argmax();
    let k = spec.n_clusters.max(f.trainer.scene.motion.bases.num_bases());
    let share = 100.0 * agreement_up_to_permutation(&labels, &gt, k) as f64 / nd as f64;
    outcome(share >= 95.0, format!("argmax basis matches object on {share:.1}% of {nd} dynamic Gaussians"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = common::write(dir.path(), "spec.json", common::TINY_SPEC);
    let cfg = common::write(dir.path(), "fit.toml", common::TINY_FIT);
    let bundle = dir.path().join("bundle");
    cmd_generate(Some(&spec), None, &bundle).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let args = FitArgs { bundle: bundle.clone(), out: out.clone(), config: Some(cfg.clone()), seed: Some(5), ablate: None, epochs: None, checkpoint_every: None, resume: None };
        cmd_fit(&args).unwrap();
        std::fs::read(out.join(CHECKPOINT_FILE)).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    outcome(a == b, format!("two fits, checkpoints of {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn metric_tables() -> Outcome {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gt: Vec<[f64; 3]> = (0..40).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let valid = vec![true; 40];
    check("epe identical", epe_3d(&gt, &gt, &valid).unwrap() == (0.0, 100.0, 100.0));
    let shifted: Vec<[f64; 3]> = gt.iter().map(|p| [p[0], p[1] + 0.07, p[2]]).collect();
    let (e, d5, d10) = epe_3d(&shifted, &gt, &valid).unwrap();
    check("epe offset 0.07", (e - 0.07).abs() < 1e-12 && d5 == 0.0 && d10 == 100.0);
    let noisy: Vec<[f64; 3]> = gt.iter().map(|p| p.map(|v| v + rng.random_range(-0.08..0.08))).collect();
    let mask: Vec<bool> = (0..40).map(|i| i % 5 != 0).collect();
    let dists: Vec<f64> = noisy.iter().zip(&gt).zip(&mask).filter(|(_, m)| **m).map(|((a, b), _)| (Vector3::from(*a) - Vector3::from(*b)).norm()).collect();
    let (e, d5, d10) = epe_3d(&noisy, &gt, &mask).unwrap();
    let n = dists.len() as f64;
    check(
        "epe oracle",
        (e - dists.iter().sum::<f64>() / n).abs() < 1e-15
            && d5 == 100.0 * dists.iter().filter(|d| **d < 0.05).count() as f64 / n
            && d10 == 100.0 * dists.iter().filter(|d| **d < 0.10).count() as f64 / n,
    );

    let uv: Vec<[f64; 2]> = (0..12).map(|i| [20.0 * i as f64, 7.0 + 11.0 * i as f64]).collect();
    let occ: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    let perfect = tapvid_metrics(&uv, &uv, &occ, &occ, 256, 256).unwrap();
    check("tapvid perfect", (perfect.aj, perfect.delta_avg, perfect.oa) == (100.0, 100.0, 100.0));
    let off: Vec<[f64; 2]> = uv.iter().map(|p| [p[0] + 3.0, p[1]]).collect();
    check("tapvid 3 px", (tapvid_metrics(&off, &uv, &occ, &occ, 256, 256).unwrap().delta_avg - 60.0).abs() < 1e-12);
    let flipped: Vec<bool> = occ.iter().map(|o| !o).collect();
    check("tapvid flipped occlusion", tapvid_metrics(&uv, &uv, &flipped, &occ, 256, 256).unwrap().oa == 0.0);

    let img: Vec<[f64; 3]> = (0..64).map(|_| [rng.random_range(0.0..0.9), rng.random_range(0.0..0.9), rng.random_range(0.0..0.9)]).collect();
    check("psnr identical", psnr(&img, &img, None).unwrap() == 99.0);
    let brighter: Vec<[f64; 3]> = img.iter().map(|p| p.map(|v| v + 0.1)).collect();
    check("psnr mse 0.01", (psnr(&brighter, &img, None).unwrap() - 20.0).abs() < 1e-9);
    let other: Vec<[f64; 3]> = (0..64).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let mse = other.iter().zip(&img).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).powi(2))).sum::<f64>() / 192.0;
    check("psnr formula", (psnr(&other, &img, None).unwrap() + 10.0 * mse.log10()).abs() < 1e-12);

    let binary: Vec<[f64; 3]> = (0..256)
        .map(|i| {
            let (x, y) = (i % 16, i / 16);
            [if (x / 3 + y / 5) % 2 == 0 || x == y { 1.0 } else { 0.0 }; 3]
        })
        .collect();
    check("ssim identical", (ssim(&binary, &binary, 16, 16, None).unwrap() - 1.0).abs() < 1e-12);
    let inverted: Vec<[f64; 3]> = binary.iter().map(|p| p.map(|v| 1.0 - v)).collect();
    check("ssim inverted fixture", (ssim(&inverted, &binary, 16, 16, None).unwrap() - -0.9132931250231987).abs() < 1e-12);
    let (a, b) = (vec![[0.25; 3]; 256], vec![[0.75; 3]; 256]);
    let luminance = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64 * 0.25 + 0.75 * 0.75 + 1e-4);
    check("ssim constant pair", (ssim(&a, &b, 16, 16, None).unwrap() - luminance).abs() < 1e-12);

    outcome(fails.is_empty(), if fails.is_empty() { "epe_3d, tapvid_metrics, psnr and ssim tables all match".into() } else { format!("mismatched: {fails:?}") })
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} {:<28} {} {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "rasterizer oracle", rasterizer_oracle());
    report(2, "gradient suite", gradient_suite());
    report(3, "procrustes recovery", procrustes_recovery());
    report(4, "initialization pipeline", initialization_pipeline());
    let syn = generate(&SceneSpec::default()).unwrap();
    let full = fit(&syn, 0, None);
    report(5, "end-to-end fit", end_to_end(&full));
    report(6, "ablation ordering", ablation_ordering(&syn, epe_percent(&full.report)));
    report(7, "motion-coefficient structure", coefficient_structure());
    report(8, "determinism", determinism());
    report(9, "metric tables", metric_tables());
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
