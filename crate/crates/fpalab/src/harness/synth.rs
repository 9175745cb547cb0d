//! Procedural ten-class glyph dataset.
//!
//! Each class is a simple geometric glyph (disk, ring, plus, diagonal cross,
//! box outline, triangle, horizontal bars, vertical bars, opposing quadrants,
//! diamond) rendered from a signed-distance function with per-sample rotation,
//! scale, offset, brightness, and pixel noise. Images are quantized to one
//! byte per pixel, so a generated split round-trips bit-exactly through the
//! IDX container. Every sample is a pure function of `(seed, split, index)`;
//! growing a split keeps its existing samples unchanged.

use crate::data::Dataset;
use crate::error::Result;
use crate::harness::datasets::{
    write_idx_images, write_idx_labels, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
use crate::seeds::rng_from;
use crate::tensor::Tensor;
use rand::Rng;
use std::f32::consts::FRAC_PI_4;
use std::path::Path;

/// Glyph class names, by label.
pub const CLASS_NAMES: [&str; 10] = [
    "disk", "ring", "plus", "cross", "box", "triangle", "h-bars", "v-bars", "quads", "diamond",
];

/// Dataset sizing and seeding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    /// Square image side in pixels.
    pub side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 4000,
            test: 1000,
            side: 28,
            seed: 7,
        }
    }
}

/// Axis-aligned box pseudo-distance with half-extents `(a, b)`.
fn box_d(u: f32, v: f32, a: f32, b: f32) -> f32 {
    (u.abs() - a).max(v.abs() - b)
}

/// Signed distance to the glyph for `class`, in canonical `[-1, 1]^2`
/// coordinates: negative inside, positive outside.
fn glyph_distance(class: usize, u: f32, v: f32) -> f32 {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r - 0.62,
        1 => (r - 0.58).abs() - 0.17,
        2 => box_d(u, v, 0.68, 0.17).min(box_d(u, v, 0.17, 0.68)),
        3 => {
            // The plus glyph rotated 45 degrees.
            let (s, c) = FRAC_PI_4.sin_cos();
            let (ru, rv) = (c * u + s * v, -s * u + c * v);
            box_d(ru, rv, 0.8, 0.17).min(box_d(ru, rv, 0.17, 0.8))
        }
        4 => box_d(u, v, 0.62, 0.62).abs() - 0.14,
        5 => {
            // Filled triangle: apex up, base at v = 0.58.
            let base = v - 0.58;
            let left = -0.82 * u - 0.57 * v - 0.33;
            let right = 0.82 * u - 0.57 * v - 0.33;
            base.max(left).max(right)
        }
        6 => box_d(u, v + 0.38, 0.68, 0.15).min(box_d(u, v - 0.38, 0.68, 0.15)),
        7 => box_d(u + 0.38, v, 0.15, 0.68).min(box_d(u - 0.38, v, 0.15, 0.68)),
        8 => {
            // Filled quadrants where u and v share a sign, with a gap on the axes.
            let outer = box_d(u, v, 0.72, 0.72);
            let gap = 0.10 - u.abs().min(v.abs());
            let sign = -(u * v) * 4.0;
            outer.max(gap).max(sign)
        }
        9 => u.abs() + v.abs() - 0.78,
        other => panic!("glyph class {other} out of range 0..10"),
    }
}

/// Render one glyph as `side * side` bytes.
///
/// `rot` is in radians, `scale` multiplies the glyph size, `(dx, dy)` shift
/// the center in canonical units, `brightness` scales the foreground, and
/// `noise` perturbs every pixel before quantization.
#[allow(clippy::too_many_arguments)]
fn render<R: Rng>(
    class: usize,
    side: usize,
    rot: f32,
    scale: f32,
    dx: f32,
    dy: f32,
    brightness: f32,
    rng: &mut R,
) -> Vec<u8> {
    // Soft edge roughly two pixels wide in canonical units.
    let edge = 4.0 / side as f32;
    let (sin, cos) = rot.sin_cos();
    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let x = (px as f32 + 0.5) / side as f32 * 2.0 - 1.0 - dx;
            let y = (py as f32 + 0.5) / side as f32 * 2.0 - 1.0 - dy;
            let u = (cos * x + sin * y) / scale;
            let v = (-sin * x + cos * y) / scale;
            let d = glyph_distance(class, u, v);
            let occupancy = (0.5 - d / edge).clamp(0.0, 1.0);
            let value = (occupancy * brightness + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            out.push((value * 255.0).round() as u8);
        }
    }
    out
}

/// Generate one split as raw bytes; labels cycle through the ten classes.
pub fn generate_split(count: usize, side: usize, seed: u64, split: &str) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % CLASS_NAMES.len();
        let mut rng = rng_from(seed, &format!("synth/{split}"), i as u64);
        let rot = rng.gen_range(-0.22f32..0.22);
        let scale = rng.gen_range(0.78f32..1.1);
        let dx = rng.gen_range(-0.12f32..0.12);
        let dy = rng.gen_range(-0.12f32..0.12);
        let brightness = rng.gen_range(0.8f32..1.0);
        pixels.extend(render(class, side, rot, scale, dx, dy, brightness, &mut rng));
        labels.push(class as u8);
    }
    (pixels, labels)
}

fn to_dataset(pixels: &[u8], labels: Vec<u8>, side: usize) -> Result<Dataset> {
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![labels.len(), 1, side, side], data)?,
        labels,
        CLASS_NAMES.len(),
    )
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(crate::error::Error::config("synth needs at least one image per split"));
        }
        if !(8..=256).contains(&self.side) {
            return Err(crate::error::Error::config(format!(
                "synth image side must lie in [8, 256], got {}",
                self.side
            )));
        }
        Ok(())
    }
}

/// Generate the `(train, test)` pair in memory.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let (train_px, train_labels) = generate_split(cfg.train, cfg.side, cfg.seed, "train");
    let (test_px, test_labels) = generate_split(cfg.test, cfg.side, cfg.seed, "test");
    Ok((
        to_dataset(&train_px, train_labels, cfg.side)?,
        to_dataset(&test_px, test_labels, cfg.side)?,
    ))
}

/// Generate both splits and write them as four IDX files under `dir`.
pub fn write_dataset_dir(dir: &Path, cfg: &SynthConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    for (count, split, images, labels) in [
        (cfg.train, "train", TRAIN_IMAGES, TRAIN_LABELS),
        (cfg.test, "test", TEST_IMAGES, TEST_LABELS),
    ] {
        let (px, lb) = generate_split(count, cfg.side, cfg.seed, split);
        write_idx_images(&dir.join(images), count, cfg.side, cfg.side, &px)?;
        write_idx_labels(&dir.join(labels), &lb)?;
    }
    Ok(())
}
