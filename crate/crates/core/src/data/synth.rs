//! Deterministic desk-scale corpus of paired pictures and spoken-style audio.
//!
//! Each class owns a unique (shape, color, tone pattern) triple. Pictures draw
//! the class shape in the class color over a noisy background; utterances are
//! two-tone sequences whose first tone encodes the shape and whose second tone
//! encodes the color. Per-record jitter (position, size, timing, amplitude,
//! noise) comes from a stream derived from `(seed, record index)`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::audio::write_wav;
use super::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

pub const SYNTH_SAMPLE_RATE_HZ: u32 = 16_000;
const SHAPE_TONES_HZ: [f64; 4] = [350.0, 550.0, 800.0, 1100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Diamond];

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Triangle => {
                // apex up, base at dy = r/2
                dy <= r * 0.6 && dy >= -r && dx.abs() <= (dy + r) * 0.62
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

/// Attributes shared by every record of a class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAttributes {
    pub class_id: usize,
    pub shape: Shape,
    pub color: [u8; 3],
    /// (shape tone, color tone) in Hz.
    pub tones_hz: (f64, f64),
}

impl ClassAttributes {
    pub fn for_class(class_id: usize, num_classes: usize) -> Self {
        let shape = Shape::ALL[class_id % Shape::ALL.len()];
        let hue = class_id as f64 / num_classes as f64;
        let color = hsv_to_rgb(hue, 0.85, 0.95);
        let color_tone = 1500.0 + 3000.0 * class_id as f64 / num_classes as f64;
        Self {
            class_id,
            shape,
            color,
            tones_hz: (SHAPE_TONES_HZ[class_id % SHAPE_TONES_HZ.len()], color_tone),
        }
    }
}

/// Everything that varies between two records of the same class.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordJitter {
    pub center: (f64, f64),
    pub radius: f64,
    pub background: f64,
    pub duration_s: f64,
    pub split_point: f64,
    pub amplitude: f64,
    pub noise_stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordParams {
    pub attributes: ClassAttributes,
    pub jitter: RecordJitter,
}

/// Parameters of record `index` (class-major order) for a given seed.
pub fn record_params(seed: u64, num_classes: usize, images_per_class: usize, index: usize) -> RecordParams {
    let class_id = index / images_per_class;
    let mut rng = record_rng(seed, index as u64);
    let jitter = RecordJitter {
        center: (128.0 + rng.random_range(-28.0..28.0), 128.0 + rng.random_range(-28.0..28.0)),
        radius: rng.random_range(48.0..72.0),
        background: rng.random_range(0.08..0.3),
        duration_s: rng.random_range(0.45..0.6),
        split_point: rng.random_range(0.4..0.6),
        amplitude: rng.random_range(0.3..0.6),
        noise_stream: rng.random(),
    };
    RecordParams {
        attributes: ClassAttributes::for_class(class_id, num_classes),
        jitter,
    }
}

fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn render_image(params: &RecordParams) -> RgbImage {
    let j = &params.jitter;
    let color = params.attributes.color;
    let mut rng = record_rng(j.noise_stream, 1);
    let bg = (j.background * 255.0) as f64;
    RgbImage::from_fn(256, 256, |x, y| {
        let dx = x as f64 - j.center.0;
        let dy = y as f64 - j.center.1;
        let noise: f64 = rng.random_range(-8.0..8.0);
        let base = if params.attributes.shape.contains(dx, dy, j.radius) {
            [color[0] as f64, color[1] as f64, color[2] as f64]
        } else {
            [bg, bg, bg]
        };
        Rgb(base.map(|c| (c + noise).clamp(0.0, 255.0) as u8))
    })
}

pub fn render_audio(params: &RecordParams) -> Vec<f32> {
    let j = &params.jitter;
    let (f_shape, f_color) = params.attributes.tones_hz;
    let n = (j.duration_s * SYNTH_SAMPLE_RATE_HZ as f64) as usize;
    let split = (n as f64 * j.split_point) as usize;
    let mut rng = record_rng(j.noise_stream, 2);
    let ramp = (0.01 * SYNTH_SAMPLE_RATE_HZ as f64) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / SYNTH_SAMPLE_RATE_HZ as f64;
            let (f, start, end) = if i < split { (f_shape, 0, split) } else { (f_color, split, n) };
            let edge = (i - start).min(end - 1 - i).min(ramp) as f64 / ramp as f64;
            let tone = j.amplitude * edge * (2.0 * PI * f * t).sin();
            let noise: f64 = StandardNormal.sample(&mut rng);
            (tone + 0.02 * noise) as f32
        })
        .collect()
}

/// Options for [`make_synthetic_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub images_per_class: usize,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be at least 2 (got {}); mismatched-class sampling needs a second class",
                self.num_classes
            )));
        }
        if self.images_per_class < 2 {
            return Err(Error::Validation(format!(
                "images_per_class must be at least 2 (got {})",
                self.images_per_class
            )));
        }
        Ok(())
    }

    /// Number of test records per class; at least two records always stay in train.
    pub fn test_per_class(&self) -> usize {
        (self.images_per_class / 5).min(self.images_per_class - 2)
    }
}

/// Writes images, audio and `manifest.tsv` under `out_dir`; returns the manifest path.
pub fn make_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    let wav_dir = out_dir.join("audio");
    for d in [out_dir, &img_dir, &wav_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let n_test = spec.test_per_class();
    let mut entries = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for index in 0..spec.num_classes * spec.images_per_class {
        let params = record_params(spec.seed, spec.num_classes, spec.images_per_class, index);
        let class_id = params.attributes.class_id;
        let within = index % spec.images_per_class;
        let stem = format!("c{class_id:03}_{within:03}");
        let image_path = img_dir.join(format!("{stem}.png"));
        let audio_path = wav_dir.join(format!("{stem}.wav"));
        render_image(&params).save(&image_path)?;
        write_wav(&audio_path, &render_audio(&params), SYNTH_SAMPLE_RATE_HZ)?;
        let split = if within >= spec.images_per_class - n_test {
            Split::Test
        } else {
            Split::Train
        };
        entries.push(ManifestEntry {
            image_path,
            audio_path,
            class_id,
            caption_index: 0,
            split,
        });
    }

    let manifest = Manifest {
        entries,
        num_classes: spec.num_classes,
        root: out_dir.to_path_buf(),
        synthetic: true,
    };
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// SHA-256 over the manifest text followed by every referenced file, in manifest order.
pub fn corpus_hash(manifest: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest.to_text().as_bytes());
    for e in &manifest.entries {
        for p in [&e.image_path, &e.audio_path] {
            let bytes = fs::read(p).map_err(|err| Error::io(p, err))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}
