//! PLY and PNG writers/readers for Gaussian sets and renders.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GaussianSet;
use crate::error::{Error, Result};
use crate::grad::Tensor;

const PLY_FLOATS: [&str; 11] = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"];
const PLY_COLORS: [&str; 3] = ["red", "green", "blue"];

/// Writes a binary little-endian PLY: positions, log-scales, quaternion `(w, x, y, z)`,
/// opacity logit as float32 and colors as uint8.
pub fn write_ply(path: impl AsRef<Path>, gs: &GaussianSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}", gs.len())?;
    for name in PLY_FLOATS {
        writeln!(w, "property float {name}")?;
    }
    for name in PLY_COLORS {
        writeln!(w, "property uchar {name}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..gs.len() {
        let floats = gs.means.row(i).iter().chain(gs.log_scales.row(i)).chain(gs.quats.row(i)).chain(gs.opacity_logits.row(i));
        for &v in floats {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &c in gs.colors.row(i) {
            w.write_all(&[quantize8(c)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a PLY written by [`write_ply`]. All Gaussians come back static.
pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianSet> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut count = None;
    let mut props = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::format(path, "missing end_header"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(Error::format(path, format!("unsupported format {fmt}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| Error::format(path, "bad vertex count"))?),
            ["property", ty, name] => props.push(((*ty).to_string(), (*name).to_string())),
            _ => {}
        }
    }
    let expected: Vec<(String, String)> = PLY_FLOATS
        .iter()
        .map(|n| ("float".to_string(), n.to_string()))
        .chain(PLY_COLORS.iter().map(|n| ("uchar".to_string(), n.to_string())))
        .collect();
    if props != expected {
        return Err(Error::format(path, "unexpected vertex properties"));
    }
    let n = count.ok_or_else(|| Error::format(path, "missing vertex element"))?;
    let mut gs = GaussianSet::new();
    let mut rec = [0u8; 11 * 4 + 3];
    for _ in 0..n {
        r.read_exact(&mut rec).map_err(|_| Error::format(path, "truncated vertex data"))?;
        let f: Vec<f64> = rec[..44].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        gs.means.push_row(&f[0..3]);
        gs.log_scales.push_row(&f[3..6]);
        gs.quats.push_row(&f[6..10]);
        gs.opacity_logits.push_row(&f[10..11]);
        gs.colors.push_row(&[rec[44] as f64 / 255.0, rec[45] as f64 / 255.0, rec[46] as f64 / 255.0]);
        gs.dynamic.push(false);
    }
    Ok(gs)
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encoder(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth) -> Result<png::Writer<BufWriter<File>>> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header().map_err(|e| Error::format(path, e.to_string()))
}

fn finish(path: &Path, mut w: png::Writer<BufWriter<File>>, data: &[u8]) -> Result<()> {
    w.write_image_data(data).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Writes an 8-bit RGB PNG from `[0, 1]` colors in row-major order.
pub fn write_rgb_png(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(pixels.len(), width * height);
    let data: Vec<u8> = pixels.iter().flat_map(|p| p.map(quantize8)).collect();
    finish(path, encoder(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight)?, &data)
}

pub fn write_gray8_png(path: impl AsRef<Path>, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(values.len(), width * height);
    finish(path, encoder(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight)?, values)
}

/// Decoded PNG samples, one `Vec` entry per channel value.
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub samples: Vec<u16>,
}

pub fn read_png(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND);
    let err = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = dec.read_info().map_err(err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        png::BitDepth::Eight => buf.iter().map(|&b| b as u16).collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok(RawImage { width: info.width as usize, height: info.height as usize, channels, bit_depth: info.bit_depth as u8, samples })
}

/// Reads an 8-bit RGB(A) or gray PNG into `[0, 1]` colors.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let path = path.as_ref();
    let img = read_png(path)?;
    if img.bit_depth != 8 {
        return Err(Error::format(path, "expected an 8-bit image"));
    }
    let px = img
        .samples
        .chunks_exact(img.channels)
        .map(|c| match img.channels {
            1 | 2 => [c[0] as f64 / 255.0; 3],
            _ => [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0],
        })
        .collect();
    Ok((img.width, img.height, px))
}

pub fn read_gray8_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = read_png(path)?;
    if img.bit_depth != 8 {
        return Err(Error::format(path, "expected an 8-bit image"));
    }
    Ok((img.width, img.height, img.samples.chunks_exact(img.channels).map(|c| c[0] as u8).collect()))
}

/// Sidecar describing how 16-bit depth codes map to scene units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScale {
    /// Scene units per code step.
    pub scale: f64,
    /// Code reserved for missing depth.
    pub invalid: u16,
}

/// Writes depth as 16-bit codes `round(d / scale)`; nonpositive or non-finite depth becomes 0.
pub fn write_depth_png16(path: impl AsRef<Path>, width: usize, height: usize, depth: &[f64], scale: f64) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(depth.len(), width * height);
    assert!(scale > 0.0);
    let data: Vec<u8> = depth.iter().flat_map(|&d| encode_depth(d, scale).to_be_bytes()).collect();
    finish(path, encoder(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen)?, &data)
}

pub fn encode_depth(d: f64, scale: f64) -> u16 {
    if !(d.is_finite() && d > 0.0) {
        return 0;
    }
    (d / scale).round().clamp(1.0, u16::MAX as f64) as u16
}

/// Writes the depth PNG plus a `.json` sidecar holding its scale.
pub fn write_depth_with_sidecar(path: impl AsRef<Path>, width: usize, height: usize, depth: &[f64], scale: f64) -> Result<()> {
    let path = path.as_ref();
    write_depth_png16(path, width, height, depth, scale)?;
    let sidecar = DepthScale { scale, invalid: 0 };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads 16-bit depth codes back into scene units; invalid pixels are 0.
pub fn read_depth_png16(path: impl AsRef<Path>, scale: f64) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let img = read_png(path)?;
    if img.bit_depth != 16 || img.channels != 1 {
        return Err(Error::format(path, "expected a 16-bit grayscale image"));
    }
    Ok((img.width, img.height, img.samples.iter().map(|&c| c as f64 * scale).collect()))
}

impl GaussianSet {
    /// Column of uint8-quantized colors, as stored in PLY.
    pub fn quantized_colors(&self) -> Tensor {
        Tensor::from_vec(self.len(), 3, self.colors.data().iter().map(|&c| quantize8(c) as f64 / 255.0).collect())
    }
}
