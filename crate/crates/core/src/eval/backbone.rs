//! Feature/classifier backbones for the metrics.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::images::images_to_tensor;
use crate::data::{Corpus, ImageArray, Split};
use crate::error::{Error, Result};
use crate::nn::ops::{avg_pool, leaky_relu, log_softmax};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Conv2d, Linear, ParamStore};
use crate::sen::model::parse_meta;

pub const BACKBONE_CHECKPOINT_KIND: &str = "eval-backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PretrainedLarge,
    DeskScaleTrained,
}

/// Class probabilities and penultimate features for a batch of images.
pub trait EvalBackbone {
    fn name(&self) -> String;
    fn provenance(&self) -> Provenance;
    fn input_size(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `[B, 3, S, S]` to (`[B, K]` probabilities, `[B, F]` features).
    fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskClassifierConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DeskClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 32],
            epochs: 40,
            batch_size: 16,
            learning_rate: 2e-3,
        }
    }
}

/// Small CNN classifier trained on real corpus images.
pub struct DeskClassifier {
    config: DeskClassifierConfig,
    num_classes: usize,
    params: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl DeskClassifier {
    pub fn new(config: DeskClassifierConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || config.channels.is_empty() || config.input_size < 8 {
            return Err(Error::Config("desk classifier needs >= 2 classes, >= 1 conv and >= 8px input".into()));
        }
        let mut params = ParamStore::new(seed, DType::F32);
        let mut convs = Vec::new();
        let mut ch = 3;
        for (i, &out) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("eval.conv{i}"), ch, out, 3, 2, 1)?);
            ch = out;
        }
        let head = Linear::new(&mut params, "eval.head", ch, num_classes)?;
        Ok(Self {
            config,
            num_classes,
            params,
            convs,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != w || h % s != 0 {
            return Err(Error::Shape(format!("backbone takes {s}px RGB (or integer multiples), got {c}x{h}x{w}")));
        }
        let mut x = avg_pool(&images.to_dtype(DType::F32)?, h / s)?;
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        Ok(x.mean(3)?.mean(2)?)
    }

    fn logits(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.features(images)?;
        Ok((self.head.forward(&f)?, f))
    }

    /// A fresh classifier fitted to the corpus train split; returns per-epoch losses too.
    pub fn fit_corpus(config: DeskClassifierConfig, corpus: &Corpus, seed: u64) -> Result<(Self, Vec<f64>)> {
        let model = Self::new(config, corpus.num_classes(), seed)?;
        let train = super::report::LabelledImages::from_corpus(corpus, Split::Train, model.config.input_size)?;
        let losses = model.fit(&train.images, &train.classes, seed)?;
        Ok((model, losses))
    }

    /// Fits the classifier on labelled images with random horizontal flips.
    pub fn fit(&self, images: &[ImageArray], labels: &[usize], seed: u64) -> Result<Vec<f64>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Validation("need one label per image".into()));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Validation(format!("label {c} outside [0, {})", self.num_classes)));
        }
        let s = self.config.input_size;
        let resized: Vec<ImageArray> = images.iter().map(|i| i.resized(s)).collect();
        let refs: Vec<&ImageArray> = resized.iter().collect();
        let all = images_to_tensor(&refs, &Device::Cpu)?;
        let flip_idx = Tensor::from_vec((0..s as u32).rev().collect::<Vec<_>>(), s, &Device::Cpu)?;
        let mut opt = Adam::new(
            self.params.named_vars_with_prefix(&["eval."]),
            AdamConfig {
                lr: self.config.learning_rate,
                beta1: 0.9,
                ..AdamConfig::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut losses = Vec::new();
        for _ in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
                let mut x = all.index_select(&idx, 0)?;
                if rng.random_bool(0.5) {
                    x = x.index_select(&flip_idx, 3)?;
                }
                let mut onehot = vec![0f32; chunk.len() * self.num_classes];
                for (r, &i) in chunk.iter().enumerate() {
                    onehot[r * self.num_classes + labels[i]] = 1.0;
                }
                let onehot = Tensor::from_vec(onehot, (chunk.len(), self.num_classes), &Device::Cpu)?;
                let (logits, _) = self.logits(&x)?;
                let loss = (log_softmax(&logits)? * onehot)?.sum(1)?.mean(0)?.neg()?;
                epoch_loss += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
                opt.step(&loss.backward()?)?;
            }
            losses.push(epoch_loss / images.len() as f64);
        }
        Ok(losses)
    }

    pub fn save(&self, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra;
        meta.insert("backbone_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("num_classes".into(), self.num_classes.to_string());
        save_checkpoint(path, BACKBONE_CHECKPOINT_KIND, &meta, &[&self.params], &BTreeMap::new())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(BACKBONE_CHECKPOINT_KIND)?;
        let config: DeskClassifierConfig = serde_json::from_str(ck.meta("backbone_config")?)?;
        let model = Self::new(config, parse_meta(&ck, "num_classes")?, 0)?;
        model.params.load_from(&ck.tensors)?;
        Ok(model)
    }
}

impl EvalBackbone for DeskClassifier {
    fn name(&self) -> String {
        format!("desk-cnn-{}px-{:?}", self.config.input_size, self.config.channels)
    }

    fn provenance(&self) -> Provenance {
        Provenance::DeskScaleTrained
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (logits, f) = self.logits(images)?;
        Ok((log_softmax(&logits)?.exp()?, f))
    }
}

/// Probabilities and features for many images, batched, as `f64` rows.
pub fn extract(backbone: &dyn EvalBackbone, images: &[ImageArray]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut probs = Vec::with_capacity(images.len());
    let mut feats = Vec::with_capacity(images.len());
    let s = backbone.input_size();
    for chunk in images.chunks(32) {
        let resized: Vec<ImageArray> = chunk.iter().map(|i| i.resized(s)).collect();
        let refs: Vec<&ImageArray> = resized.iter().collect();
        let (p, f) = backbone.forward(&images_to_tensor(&refs, &Device::Cpu)?)?;
        probs.extend(p.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        feats.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok((probs, feats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(size: usize, rgb: [f32; 3], jitter: f32) -> ImageArray {
        let data = (0..size * size).flat_map(|i| rgb.map(|c| c + jitter * ((i % 7) as f32 / 7.0 - 0.5))).collect();
        ImageArray::new(size, data).unwrap()
    }

    fn tiny() -> DeskClassifierConfig {
        DeskClassifierConfig {
            input_size: 16,
            channels: vec![8, 8],
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-2,
        }
    }

    #[test]
    fn learns_colours_and_reports_distributions() {
        let colours = [[0.8, -0.8, -0.8], [-0.8, -0.8, 0.8], [-0.8, 0.8, -0.8]];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, rgb) in colours.iter().enumerate() {
            for j in 0..4 {
                images.push(solid(16, *rgb, 0.1 * j as f32));
                labels.push(c);
            }
        }
        let net = DeskClassifier::new(tiny(), 3, 1).unwrap();
        let losses = net.fit(&images, &labels, 2).unwrap();
        assert!(losses.last().unwrap() < &(0.2 * losses[0]));
        let (probs, feats) = extract(&net, &images).unwrap();
        for (p, &y) in probs.iter().zip(&labels) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(arg, y);
        }
        assert!(feats.iter().all(|f| f.len() == 8));
        assert_eq!(net.provenance(), Provenance::DeskScaleTrained);
    }

    #[test]
    fn reload_gives_identical_outputs() {
        let net = DeskClassifier::new(tiny(), 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.safetensors");
        net.save(&p, BTreeMap::new()).unwrap();
        let back = DeskClassifier::load(&p).unwrap();
        let imgs = [solid(32, [0.1, 0.2, 0.3], 0.5)];
        assert_eq!(extract(&net, &imgs).unwrap(), extract(&back, &imgs).unwrap());
    }
}
