//! Procedural labelled image dataset.
//!
//! Each class is a family of filled shapes with a class-specific shape type,
//! hue and stripe frequency, placed with random jitter on a dark background
//! and corrupted by small Gaussian noise. Sample `i` has class `i % n_classes`
//! and is a pure function of `(spec, i)`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::rng::{self, Rng};

pub const CHANNELS: usize = 3;
const NOISE_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            images_per_class: 128,
            image_size: 16,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(config("n_classes must be positive"));
        }
        if self.image_size < 4 || self.image_size > 32 {
            return Err(config(format!(
                "image_size must be in [4, 32], got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_classes * self.images_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images stored channel-first (`C x H x W`) per sample, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        CHANNELS * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, pixels: &[f32], label: usize) {
        assert_eq!(pixels.len(), self.pixels_per_image());
        self.pixels.extend_from_slice(pixels);
        self.labels.push(label);
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        let mut out = ImageBatch::empty(self.size);
        for &i in idx {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// Little-endian bytes of the pixel buffer followed by the labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4 + self.labels.len() * 8);
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }

    pub fn to_rgb8(&self, i: usize) -> image::RgbImage {
        let s = self.size;
        let px = self.image(i);
        image::RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let at = |c: usize| {
                let v = px[c * s * s + y as usize * s + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// 90/10 split from a hash of the sample index.
pub fn split_of(index: usize) -> Split {
    if rng::hash_index(index as u64).is_multiple_of(10) {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: ImageBatch,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Diamond,
}

struct ClassStyle {
    shape: ShapeKind,
    rgb: [f64; 3],
    stripe_cycles: f64,
    stripe_angle: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_style(class: usize, n_classes: usize) -> ClassStyle {
    let shape = match class % 4 {
        0 => ShapeKind::Disc,
        1 => ShapeKind::Square,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Diamond,
    };
    ClassStyle {
        shape,
        rgb: hsv_to_rgb(class as f64 / n_classes as f64, 0.85, 0.95),
        stripe_cycles: if (class / 4).is_multiple_of(2) { 1.5 } else { 3.5 },
        stripe_angle: if (class / 4).is_multiple_of(2) { 0.0 } else { PI / 2.0 },
    }
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, radius: f64) -> bool {
    match shape {
        ShapeKind::Disc => dx * dx + dy * dy <= radius * radius,
        ShapeKind::Square => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
        ShapeKind::Triangle => {
            // apex up: y from -r to +r, half-width grows linearly
            let t = (dy + radius) / (2.0 * radius);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * radius
        }
        ShapeKind::Diamond => dx.abs() + dy.abs() <= radius,
    }
}

/// Renders sample `index` of `spec`.
pub fn generate_image(spec: &DatasetSpec, index: usize) -> (Vec<f32>, usize) {
    let label = index % spec.n_classes;
    let style = class_style(label, spec.n_classes);
    let mut rng: Rng = rng::stream(spec.seed, &format!("image/{index}"));
    let s = spec.image_size as f64;
    let jitter = s / 8.0;
    let cx = s / 2.0 - 0.5 + rng.random_range(-jitter..=jitter);
    let cy = s / 2.0 - 0.5 + rng.random_range(-jitter..=jitter);
    let radius = s * rng.random_range(0.28..0.40);
    let phase = rng.random_range(0.0..2.0 * PI);
    let bg: [f64; 3] = std::array::from_fn(|_| 0.08 + 0.07 * rng.random::<f64>());
    let (sin_a, cos_a) = style.stripe_angle.sin_cos();
    let n = spec.image_size;
    let mut px = vec![0f32; CHANNELS * n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let on = inside(style.shape, dx, dy, radius);
            let stripe = 0.6
                + 0.4 * (2.0 * PI * style.stripe_cycles * (x as f64 * cos_a + y as f64 * sin_a) / s + phase).sin();
            for c in 0..CHANNELS {
                let base = if on { style.rgb[c] * stripe } else { bg[c] };
                let v = base + NOISE_STD * rng::normal(&mut rng);
                px[c * n * n + y * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (px, label)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut images = ImageBatch::empty(spec.image_size);
    let mut splits = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        let (px, label) = generate_image(spec, i);
        images.push(&px, label);
        splits.push(split_of(i));
    }
    Ok(Dataset {
        spec: *spec,
        images,
        splits,
    })
}

/// Writes every sample as a PNG plus `manifest.txt` with one
/// `path<TAB>label<TAB>split` line per sample.
pub fn materialize(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
    for i in 0..dataset.images.len() {
        let rel = format!("images/{i:06}.png");
        dataset.images.to_rgb8(i).save(dir.join(&rel))?;
        let split = match dataset.splits[i] {
            Split::Train => "train",
            Split::Val => "val",
        };
        writeln!(manifest, "{rel}\t{}\t{split}", dataset.images.labels[i])?;
    }
    Ok(())
}

/// Checks that a batch's pixels lie in `[0, 1]` and labels are in range.
pub fn validate_batch(batch: &ImageBatch, n_classes: usize) -> Result<()> {
    if batch.pixels.len() != batch.len() * batch.pixels_per_image() {
        return Err(contract("pixel buffer does not match batch shape"));
    }
    if batch.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(contract("pixel outside [0, 1]"));
    }
    if batch.labels.iter().any(|&l| l >= n_classes) {
        return Err(contract("label out of range"));
    }
    Ok(())
}
