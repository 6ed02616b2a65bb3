use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use splat4d::evalmetrics::{evaluate, MetricReport};
use splat4d::gradsuite::{check_loss_terms, TermCheck, GRAD_TOLERANCE};
use splat4d::motion::MotionMode;
use splat4d::sequence::{Sequence, TrackTable};
use splat4d::splat::{rasterize_frame, write_ply, write_rgb_png};
use splat4d::synthdata::{generate, SceneSpec};
use splat4d::training::{loss_csv, predict_tracks, prepare, resume, Ablation, FitConfig, PredictedTracks, Scene, Trainer};

use crate::bundle::{read_bundle, read_truth, write_synthetic};
use crate::checkpoint::Checkpoint;
use crate::config;

pub const CHECKPOINT_FILE: &str = "checkpoint.s4d";
pub const LOSS_FILE: &str = "loss.csv";

pub fn cmd_generate(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<SceneSpec> {
    let mut spec: SceneSpec = match spec_path {
        Some(p) => config::load(p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let syn = generate(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_synthetic(out, &syn)?;
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    Ok(spec)
}

#[derive(Clone, Debug, Default)]
pub struct FitArgs {
    pub bundle: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub ablate: Option<Ablation>,
    pub epochs: Option<usize>,
    pub checkpoint_every: Option<u64>,
    pub resume: Option<PathBuf>,
}

/// File values override defaults and flags override both.
pub fn resolve_fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg: FitConfig = match &args.config {
        Some(p) => config::load(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.ablate.is_some() {
        cfg.ablate = args.ablate;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.resolved().1.validate()?;
    Ok(cfg)
}

fn snapshot(cfg: &FitConfig, trainer: &Trainer) -> Checkpoint {
    Checkpoint { config: cfg.clone(), scene: trainer.scene.clone(), state: trainer.state.clone(), history: trainer.history.clone() }
}

fn write_outputs(out: &Path, cfg: &FitConfig, trainer: &Trainer) -> Result<()> {
    snapshot(cfg, trainer).save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(LOSS_FILE), loss_csv(&trainer.history))?;
    Ok(())
}

/// Initializes (or resumes) and trains, checkpointing periodically and at the end.
///
/// A failed step leaves the trainer at its last good state, which is saved before the error is returned.
pub fn cmd_fit(args: &FitArgs) -> Result<Checkpoint> {
    let (seq, tracks) = read_bundle(&args.bundle)?;
    let (cfg, mut trainer) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut cfg = ck.config.clone();
            if let Some(e) = args.epochs {
                cfg.train.epochs = e;
            }
            let trainer = resume(&seq, &tracks, &cfg, ck.scene, ck.state, ck.history)?;
            (cfg, trainer)
        }
        None => {
            let cfg = resolve_fit_config(args)?;
            (cfg.clone(), prepare(&seq, &tracks, &cfg)?.0)
        }
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let every = args.checkpoint_every.unwrap_or(0);
    let out = args.out.clone();
    let result = trainer.run(|t, rec| {
        if every > 0 && rec.step % every == 0 {
            write_outputs(&out, &cfg, t).map_err(|e| splat4d::error::Error::InvalidSpec(format!("{e:#}")))?;
        }
        Ok(())
    });
    write_outputs(&args.out, &cfg, &trainer)?;
    result?;
    Ok(snapshot(&cfg, &trainer))
}

pub fn cmd_eval(checkpoint: &Path, bundle: &Path, truth: &Path) -> Result<MetricReport> {
    ensure!(truth.exists(), "ground truth {} does not exist", truth.display());
    let ck = Checkpoint::load(checkpoint)?;
    let (seq, _) = read_bundle(bundle)?;
    let truth = read_truth(truth)?;
    ensure!(
        seq.num_frames() == ck.scene.motion.num_frames() && truth.num_frames == seq.num_frames(),
        "frame counts differ: bundle {}, checkpoint {}, ground truth {}",
        seq.num_frames(),
        ck.scene.motion.num_frames(),
        truth.num_frames
    );
    let report = evaluate(&ck.scene, &seq.cameras(), &truth)?;
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportTarget {
    Ply,
    TracksCsv,
    Renders,
}

/// Each track is queried at its first visible frame at the observed pixel.
pub fn track_queries(tracks: &TrackTable) -> Vec<(usize, [f64; 2])> {
    (0..tracks.num_points)
        .map(|p| {
            let t = (0..tracks.num_frames).find(|&t| tracks.is_visible(p, t)).unwrap_or(0);
            (t, tracks.uv[tracks.idx(p, t)])
        })
        .collect()
}

pub fn tracks_csv(pred: &PredictedTracks) -> String {
    let mut s = String::from("point_id,frame,x,y,z,u,v,visible\n");
    let t_count = pred.num_frames;
    for (i, (xyz, uv)) in pred.xyz.iter().zip(&pred.uv).enumerate() {
        let (p, t) = (i / t_count, i % t_count);
        s += &format!("{p},{t},{:e},{:e},{:e},{:e},{:e},{}\n", xyz[0], xyz[1], xyz[2], uv[0], uv[1], !pred.occluded[i] as u8);
    }
    s
}

fn need_bundle(bundle: Option<&Path>, what: &str) -> Result<(Sequence, TrackTable)> {
    match bundle {
        Some(b) => read_bundle(b),
        None => bail!("exporting {what} needs --bundle for cameras and tracks"),
    }
}

/// Writes the requested artifacts and returns their paths.
pub fn cmd_export(checkpoint: &Path, target: ExportTarget, bundle: Option<&Path>, frames: Option<&[usize]>, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scene: &Scene = &ck.scene;
    let t_count = scene.motion.num_frames();
    let frames: Vec<usize> = frames.map_or_else(|| (0..t_count).collect(), <[usize]>::to_vec);
    if let Some(&t) = frames.iter().find(|&&t| t >= t_count) {
        bail!("frame {t} is out of range for {t_count} frames");
    }
    let mut written = Vec::new();
    match target {
        ExportTarget::Ply => {
            let p = out.join("gaussians.ply");
            write_ply(&p, &scene.gaussians)?;
            written.push(p);
        }
        ExportTarget::TracksCsv => {
            let (seq, tracks) = need_bundle(bundle, "tracks")?;
            ensure!(seq.num_frames() == t_count, "bundle has {} frames, checkpoint {t_count}", seq.num_frames());
            let pred = predict_tracks(scene, &seq.cameras(), &track_queries(&tracks))?;
            let p = out.join("tracks.csv");
            fs::write(&p, tracks_csv(&pred))?;
            written.push(p);
        }
        ExportTarget::Renders => {
            let (seq, _) = need_bundle(bundle, "renders")?;
            ensure!(seq.num_frames() == t_count, "bundle has {} frames, checkpoint {t_count}", seq.num_frames());
            for &t in &frames {
                let cam = &seq.frames[t].camera;
                let r = rasterize_frame(&scene.gaussians, &scene.poses_at(t)?, cam)?;
                let p = out.join(format!("render_{t:04}.png"));
                write_rgb_png(&p, r.width, r.height, &r.image)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub mode: MotionMode,
    pub terms: Vec<TermCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_error < GRAD_TOLERANCE)
    }
}

/// SE(3)-basis fixtures for `seeds`, plus one fixture per alternative motion mode.
pub fn cmd_check_grads(seed: u64, seeds: u64) -> Result<Vec<GradReport>> {
    let mut runs: Vec<(u64, MotionMode)> = (seed..seed + seeds).map(|s| (s, MotionMode::Se3)).collect();
    runs.push((seed, MotionMode::TranslationBases));
    runs.push((seed, MotionMode::PerGaussian));
    runs.into_iter().map(|(s, mode)| Ok(GradReport { seed: s, mode, terms: check_loss_terms(s, mode)? })).collect()
}
