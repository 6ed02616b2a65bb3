//! Checkpoint file: `S4DCKPT1`, a u64 header length, a JSON header, then every array as little-endian f64.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splat4d::grad::Tensor;
use splat4d::motion::{MotionBases, MotionCoeffs, MotionMode, MotionModel};
use splat4d::optim::{Adam, AdamHyper};
use splat4d::splat::GaussianSet;
use splat4d::training::{FitConfig, LossRecord, Scene, TrainState, TERMS};

pub const MAGIC: &[u8; 8] = b"S4DCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: FitConfig,
    mode: MotionMode,
    num_frames: usize,
    t0: usize,
    dynamic: Vec<bool>,
    step: u64,
    adam_hyper: AdamHyper,
    adam_step: u64,
    rng: ChaCha8Rng,
    arrays: Vec<ArrayInfo>,
}

/// Everything needed to evaluate, export or continue a fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FitConfig,
    pub scene: Scene,
    pub state: TrainState,
    pub history: Vec<LossRecord>,
}

const HISTORY_COLS: usize = TERMS.len() + 3;

fn history_tensor(history: &[LossRecord]) -> Tensor {
    let mut t = Tensor::zeros(history.len(), HISTORY_COLS);
    for (r, rec) in history.iter().enumerate() {
        let row = t.row_mut(r);
        row[0] = rec.step as f64;
        row[1] = rec.epoch as f64;
        row[2..2 + TERMS.len()].copy_from_slice(&rec.terms);
        row[HISTORY_COLS - 1] = rec.total;
    }
    t
}

fn history_records(t: &Tensor) -> Vec<LossRecord> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            LossRecord { step: row[0] as u64, epoch: row[1] as usize, terms: row[2..2 + TERMS.len()].try_into().unwrap(), total: row[HISTORY_COLS - 1] }
        })
        .collect()
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let gs = &self.scene.gaussians;
        let mo = &self.scene.motion;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("means".into(), &gs.means),
            ("quats".into(), &gs.quats),
            ("log_scales".into(), &gs.log_scales),
            ("opacity_logits".into(), &gs.opacity_logits),
            ("colors".into(), &gs.colors),
            ("bases.rot6d".into(), &mo.bases.rot6d),
            ("bases.transl".into(), &mo.bases.transl),
            ("coeffs.logits".into(), &mo.coeffs.logits),
            ("offsets".into(), &mo.offsets),
        ];
        for (i, m) in self.state.adam.m.iter().enumerate() {
            out.push((format!("adam.m.{i}"), m));
        }
        for (i, v) in self.state.adam.v.iter().enumerate() {
            out.push((format!("adam.v.{i}"), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let history = history_tensor(&self.history);
        let mut arrays = self.arrays();
        arrays.push(("history".into(), &history));
        let mo = &self.scene.motion;
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            mode: mo.mode,
            num_frames: mo.bases.num_frames,
            t0: mo.bases.t0,
            dynamic: self.scene.gaussians.dynamic.clone(),
            step: self.state.step,
            adam_hyper: self.state.adam.hyper,
            adam_step: self.state.adam.step,
            rng: self.state.rng.clone(),
            arrays: arrays.iter().map(|(name, t)| ArrayInfo { name: name.clone(), rows: t.rows(), cols: t.cols() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * arrays.iter().map(|(_, t)| t.len()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &arrays {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        ensure!(buf.len() >= 16 && &buf[..8] == MAGIC, "not a checkpoint (bad magic)");
        let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        ensure!(buf.len() >= 16 + len, "truncated checkpoint header");
        let header: Header = serde_json::from_slice(&buf[16..16 + len]).context("parsing checkpoint header")?;
        ensure!(header.version == VERSION, "unsupported checkpoint version {}", header.version);
        let mut offset = 16 + len;
        let mut tensors = HashMap::new();
        for a in &header.arrays {
            let n = a.rows.checked_mul(a.cols).context("array too large")?;
            ensure!(buf.len() >= offset + 8 * n, "truncated array `{}`", a.name);
            let data = buf[offset..offset + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            offset += 8 * n;
            tensors.insert(a.name.clone(), Tensor::from_vec(a.rows, a.cols, data));
        }
        ensure!(offset == buf.len(), "{} trailing bytes after the last array", buf.len() - offset);
        fn take(tensors: &mut HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
            tensors.remove(name).with_context(|| format!("checkpoint lacks array `{name}`"))
        }
        let gaussians = GaussianSet {
            means: take(&mut tensors, "means")?,
            quats: take(&mut tensors, "quats")?,
            log_scales: take(&mut tensors, "log_scales")?,
            opacity_logits: take(&mut tensors, "opacity_logits")?,
            colors: take(&mut tensors, "colors")?,
            dynamic: header.dynamic,
        };
        let motion = MotionModel {
            mode: header.mode,
            bases: MotionBases { num_frames: header.num_frames, t0: header.t0, rot6d: take(&mut tensors, "bases.rot6d")?, transl: take(&mut tensors, "bases.transl")? },
            coeffs: MotionCoeffs { logits: take(&mut tensors, "coeffs.logits")? },
            offsets: take(&mut tensors, "offsets")?,
        };
        let (mut m, mut v) = (Vec::new(), Vec::new());
        while let Some(t) = tensors.remove(&format!("adam.m.{}", m.len())) {
            m.push(t);
        }
        while let Some(t) = tensors.remove(&format!("adam.v.{}", v.len())) {
            v.push(t);
        }
        ensure!(m.len() == v.len(), "mismatched optimizer moments");
        let history = history_records(&take(&mut tensors, "history")?);
        if let Some(name) = tensors.keys().next() {
            bail!("unexpected checkpoint array `{name}`");
        }
        let scene = Scene { gaussians, motion };
        scene.validate()?;
        let state = TrainState { step: header.step, adam: Adam { hyper: header.adam_hyper, step: header.adam_step, m, v }, rng: header.rng };
        Ok(Self { config: header.config, scene, state, history })
    }

    /// Writes through a temporary file so an interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&buf).with_context(|| format!("loading {}", path.display()))
    }
}
