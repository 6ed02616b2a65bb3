//! On-disk sequence bundles: manifest, per-frame PNGs, 16-bit depth and the binary track table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use splat4d::geometry::{Camera, RigidTransform};
use splat4d::sequence::{DepthRef, Frame, Sequence, TrackTable};
use splat4d::splat::{read_depth_png16, read_gray8_png, read_rgb_png, write_depth_with_sidecar, write_gray8_png, write_rgb_png};
use splat4d::synthdata::{GroundTruth, Synthetic};

pub const MANIFEST: &str = "manifest.json";
pub const TRACKS: &str = "tracks.bin";
pub const TRUTH_DIR: &str = "gt";
pub const TRUTH: &str = "truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extrinsics {
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// Row-major intrinsic matrix.
    pub intrinsics: [f64; 9],
    pub extrinsics: Extrinsics,
    pub image: String,
    pub depth: String,
    /// Scene units per 16-bit depth code.
    pub depth_scale: f64,
    pub mask: String,
    /// Metric depth samples `[u, v, depth]`.
    pub depth_refs: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<FrameEntry>,
    pub tracks: String,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn depth_scale(depth: &[f64]) -> f64 {
    let max = depth.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
    if max > 0.0 {
        max / 65000.0
    } else {
        1.0
    }
}

/// Writes `P`, `T` as u32 and then, point-major, `f32 u, f32 v, u8 visible, f32 confidence`, all little-endian.
pub fn write_tracks(path: &Path, tracks: &TrackTable) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + tracks.uv.len() * 13);
    buf.extend_from_slice(&(tracks.num_points as u32).to_le_bytes());
    buf.extend_from_slice(&(tracks.num_frames as u32).to_le_bytes());
    for i in 0..tracks.uv.len() {
        buf.extend_from_slice(&(tracks.uv[i][0] as f32).to_le_bytes());
        buf.extend_from_slice(&(tracks.uv[i][1] as f32).to_le_bytes());
        buf.push(tracks.visible[i] as u8);
        buf.extend_from_slice(&(tracks.confidence[i] as f32).to_le_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn read_tracks(path: &Path) -> Result<TrackTable> {
    let buf = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(buf.len() >= 8, "{}: truncated track header", path.display());
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64;
    let (p, t) = (u32_at(0), u32_at(4));
    let n = p.checked_mul(t).context("track table too large")?;
    ensure!(buf.len() == 8 + 13 * n, "{}: expected {} bytes for {p}x{t} tracks, found {}", path.display(), 8 + 13 * n, buf.len());
    let mut tracks = TrackTable::new(p, t);
    for i in 0..n {
        let o = 8 + 13 * i;
        tracks.uv[i] = [f32_at(o), f32_at(o + 4)];
        tracks.visible[i] = match buf[o + 8] {
            0 => false,
            1 => true,
            v => bail!("{}: visibility byte {v} at entry {i}", path.display()),
        };
        tracks.confidence[i] = f32_at(o + 9);
    }
    tracks.validate()?;
    Ok(tracks)
}

/// Writes the sequence and tracks under `dir`.
pub fn write_bundle(dir: &Path, seq: &Sequence, tracks: &TrackTable) -> Result<()> {
    seq.validate()?;
    for sub in ["images", "depths", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let (w, h) = (seq.width, seq.height);
    let mut frames = Vec::with_capacity(seq.num_frames());
    for (t, f) in seq.frames.iter().enumerate() {
        let entry = FrameEntry {
            intrinsics: row_major(&f.camera.k),
            extrinsics: Extrinsics { rotation: row_major(&f.camera.extrinsics.rotation), translation: f.camera.extrinsics.translation.into() },
            image: format!("images/{t:04}.png"),
            depth: format!("depths/{t:04}.png"),
            depth_scale: depth_scale(&f.depth),
            mask: format!("masks/{t:04}.png"),
            depth_refs: f.depth_refs.iter().map(|r| [r.u, r.v, r.depth]).collect(),
        };
        write_rgb_png(dir.join(&entry.image), w, h, &f.image)?;
        write_depth_with_sidecar(dir.join(&entry.depth), w, h, &f.depth, entry.depth_scale)?;
        write_gray8_png(dir.join(&entry.mask), w, h, &f.mask.iter().map(|&m| if m { 255 } else { 0 }).collect::<Vec<_>>())?;
        frames.push(entry);
    }
    write_tracks(&dir.join(TRACKS), tracks)?;
    let manifest = Manifest { version: 1, num_frames: seq.num_frames(), width: w, height: h, frames, tracks: TRACKS.into() };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(m.frames.len() == m.num_frames, "manifest lists {} frames but num_frames is {}", m.frames.len(), m.num_frames);
    Ok(m)
}

fn check_size(path: &Path, (w, h): (usize, usize), m: &Manifest) -> Result<()> {
    ensure!(w == m.width && h == m.height, "{} is {w}x{h}, manifest says {}x{}", path.display(), m.width, m.height);
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<(Sequence, TrackTable)> {
    let m = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(m.num_frames);
    for f in &m.frames {
        let k = Matrix3::from_row_slice(&f.intrinsics);
        let ext = RigidTransform::new(Matrix3::from_row_slice(&f.extrinsics.rotation), Vector3::from(f.extrinsics.translation));
        let camera = Camera::new(k, ext, m.width, m.height)?;
        let p = dir.join(&f.image);
        let (w, h, image) = read_rgb_png(&p)?;
        check_size(&p, (w, h), &m)?;
        let p = dir.join(&f.depth);
        let (w, h, depth) = read_depth_png16(&p, f.depth_scale)?;
        check_size(&p, (w, h), &m)?;
        let p = dir.join(&f.mask);
        let (w, h, mask) = read_gray8_png(&p)?;
        check_size(&p, (w, h), &m)?;
        let depth_refs = f.depth_refs.iter().map(|r| DepthRef { u: r[0], v: r[1], depth: r[2] }).collect();
        frames.push(Frame { camera, image, depth, mask: mask.iter().map(|&v| v >= 128).collect(), depth_refs });
    }
    let seq = Sequence { width: m.width, height: m.height, frames };
    seq.validate()?;
    let tracks = read_tracks(&dir.join(&m.tracks))?;
    ensure!(tracks.num_frames == m.num_frames, "tracks cover {} frames, manifest has {}", tracks.num_frames, m.num_frames);
    Ok((seq, tracks))
}

/// Ground truth as JSON plus one PNG per novel view.
pub fn write_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (j, v) in truth.novel_views.iter().enumerate() {
        write_rgb_png(dir.join(novel_view_name(j)), v.camera.width, v.camera.height, &v.image)?;
    }
    fs::write(dir.join(TRUTH), serde_json::to_string(truth)?)?;
    Ok(())
}

fn novel_view_name(j: usize) -> String {
    format!("novel_{j:02}.png")
}

/// Accepts the ground-truth directory or its `truth.json`.
pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let (dir, file): (PathBuf, PathBuf) = if path.is_dir() { (path.to_path_buf(), path.join(TRUTH)) } else { (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf()) };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let mut truth: GroundTruth = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    for (j, v) in truth.novel_views.iter_mut().enumerate() {
        let p = dir.join(novel_view_name(j));
        let (w, h, image) = read_rgb_png(&p)?;
        ensure!(w == v.camera.width && h == v.camera.height, "{} does not match its camera", p.display());
        v.image = image;
    }
    Ok(truth)
}

/// Bundle plus ground truth under `dir/gt`.
pub fn write_synthetic(dir: &Path, syn: &Synthetic) -> Result<()> {
    write_bundle(dir, &syn.sequence, &syn.tracks)?;
    write_truth(&dir.join(TRUTH_DIR), &syn.truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> TrackTable {
        let mut t = TrackTable::new(3, 2);
        for i in 0..6 {
            t.uv[i] = [i as f64 * 1.5, 10.0 - i as f64];
            t.visible[i] = i % 4 != 1;
            t.confidence[i] = if t.visible[i] { 0.25 * (i % 3) as f64 + 0.5 } else { 0.0 };
        }
        t
    }

    #[test]
    fn tracks_round_trip_with_fixed_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACKS);
        let t = table();
        write_tracks(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 13 * 6);
        assert_eq!(&bytes[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(f32::from_le_bytes(bytes[8 + 13..12 + 13].try_into().unwrap()), 1.5);
        assert_eq!(bytes[8 + 13 + 8], 0);
        let back = read_tracks(&path).unwrap();
        assert_eq!((back.uv, back.visible, back.confidence), (t.uv, t.visible, t.confidence));
    }

    #[test]
    fn malformed_track_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACKS);
        write_tracks(&path, &table()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_tracks(&path).is_err());
        let mut bad = bytes.clone();
        bad[8 + 8] = 7;
        fs::write(&path, &bad).unwrap();
        assert!(read_tracks(&path).is_err());
        fs::write(&path, [1, 0]).unwrap();
        assert!(read_tracks(&path).is_err());
    }
}
