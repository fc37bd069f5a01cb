//! In-memory paired corpus and variable-length speech batching.

use candle_core::{Device, Tensor};

use super::audio::read_wav;
use super::frontend::{FrontendConfig, LogMelExtractor, Spectrogram};
use super::images::{load_source_image, ImageArray, ScaledImage};
use super::manifest::{Manifest, Split};
use crate::error::{Error, Result};

/// Scales every paired sample carries.
pub const PYRAMID_SCALES: [usize; 3] = [64, 128, 256];

/// One (utterance, picture, label) record.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub spectrogram: Spectrogram,
    pub images: ScaledImage,
    pub class_id: usize,
    pub split: Split,
    pub is_synthetic: bool,
}

impl PairedSample {
    pub fn image(&self, scale: usize) -> Result<&ImageArray> {
        self.images
            .at(scale)
            .ok_or_else(|| Error::Shape(format!("sample has no {scale}px image")))
    }
}

/// A loaded manifest: every record decoded and featurized.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub samples: Vec<PairedSample>,
    pub frontend: FrontendConfig,
}

impl Corpus {
    /// Decodes all records; `augment` precomputes the enlarged images random crops need.
    pub fn load(manifest: Manifest, frontend: &FrontendConfig, augment: bool) -> Result<Self> {
        let extractor = LogMelExtractor::new(frontend.clone())?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let wave = read_wav(&e.audio_path, frontend.sample_rate_hz)?;
            let spectrogram = extractor.compute(&wave).map_err(|err| {
                Error::Validation(format!("{}: {err}", e.audio_path.display()))
            })?;
            let src = load_source_image(&e.image_path)?;
            samples.push(PairedSample {
                spectrogram,
                images: ScaledImage::from_source(&src, &PYRAMID_SCALES, augment)?,
                class_id: e.class_id,
                split: e.split,
                is_synthetic: manifest.synthetic,
            });
        }
        Ok(Self {
            manifest,
            samples,
            frontend: frontend.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }
}

/// Padded batch of spectrograms: `[batch, max_frames, num_mel]` plus true lengths.
#[derive(Debug, Clone)]
pub struct SpeechBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

/// Pads to the longest utterance (or `min_frames`, if larger) using `pad_value`.
pub fn pad_spectrograms(
    specs: &[&Spectrogram],
    pad_value: f32,
    min_frames: usize,
    device: &Device,
) -> Result<SpeechBatch> {
    let num_mel = specs
        .first()
        .map(|s| s.num_mel())
        .ok_or_else(|| Error::Shape("empty speech batch".into()))?;
    let max_frames = specs
        .iter()
        .map(|s| s.num_frames())
        .max()
        .unwrap_or(0)
        .max(min_frames);
    let mut buf = vec![pad_value; specs.len() * max_frames * num_mel];
    for (b, s) in specs.iter().enumerate() {
        if s.num_mel() != num_mel {
            return Err(Error::Shape(format!(
                "mixed Mel sizes in batch: {num_mel} and {}",
                s.num_mel()
            )));
        }
        let at = b * max_frames * num_mel;
        buf[at..at + s.data().len()].copy_from_slice(s.data());
    }
    Ok(SpeechBatch {
        features: Tensor::from_vec(buf, (specs.len(), max_frames, num_mel), device)?,
        lengths: specs.iter().map(|s| s.num_frames()).collect(),
    })
}
