#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splat4d"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn splat4d")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "splat4d {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two objects, 8 frames at 16x16, 200 Gaussians.
pub const TINY_SPEC: &str = r#"{
  "n_clusters": 2,
  "points_per_cluster": 16,
  "eval_points_per_cluster": 8,
  "gaussians_per_cluster": 50,
  "background_gaussians": 100,
  "num_frames": 8,
  "width": 16,
  "height": 16,
  "novel_views": 2,
  "depth_refs_per_frame": 32,
  "seed": 3
}"#;

pub const TINY_FIT: &str = r#"
seed = 0

[init.prefit]
steps = 100

[train]
epochs = 3
num_bases = 2
n_dynamic = 100
n_static = 100
"#;

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

pub fn tiny_bundle(dir: &Path) -> PathBuf {
    let spec = write(dir, "spec.json", TINY_SPEC);
    let bundle = dir.join("bundle");
    run_ok(&["generate", "--config", p(&spec), "--out", p(&bundle)]);
    bundle
}

/// Relative path and bytes of every file under `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}
