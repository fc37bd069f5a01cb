//! Image and speech encoders and the per-modality class heads.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::{pad_spectrograms, FrontendConfig, SpeechBatch, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::ops::{length_mask, leaky_relu, masked_softmax};
use crate::nn::{load_checkpoint, BiGru, Checkpoint, Conv1d, ConvFeatureConfig, ConvFeatureNet, FeatureBackbone, Linear, ParamStore};

pub const SEN_CHECKPOINT_KIND: &str = "sen";

/// Architecture and optimization settings for the embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenConfig {
    /// Common embedding space size.
    pub embed_dim: usize,
    /// Softmax sharpness on cosine similarities.
    pub beta: f64,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub gru_hidden: usize,
    pub attention_dim: usize,
    pub backbone: ConvFeatureConfig,
    pub freeze_backbone: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SenConfig {
    fn default() -> Self {
        Self {
            embed_dim: 1024,
            beta: 10.0,
            conv_channels: 128,
            conv_kernel: 5,
            gru_hidden: 128,
            attention_dim: 128,
            backbone: ConvFeatureConfig::default(),
            freeze_backbone: true,
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 100,
        }
    }
}

impl SenConfig {
    /// Small settings that train in well under a minute on one core.
    pub fn ci() -> Self {
        Self {
            embed_dim: 64,
            conv_channels: 32,
            gru_hidden: 32,
            attention_dim: 32,
            learning_rate: 2e-3,
            batch_size: 8,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bad.push(format!("beta must be positive, got {}", self.beta));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("conv_channels", self.conv_channels),
            ("gru_hidden", self.gru_hidden),
            ("attention_dim", self.attention_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.conv_kernel % 2 == 0 {
            bad.push(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning_rate must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Backbone features followed by one linear map into the common space.
pub struct ImageEncoder {
    backbone: Box<dyn FeatureBackbone>,
    feat_mean: Var,
    feat_std: Var,
    proj: Linear,
    frozen: bool,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, backbone: Box<dyn FeatureBackbone>, embed_dim: usize, frozen: bool) -> Result<Self> {
        let f = backbone.feature_dim();
        let feat_mean = ps.constant("sen.norm.feat_mean", &[f], 0.0)?;
        let feat_std = ps.constant("sen.norm.feat_std", &[f], 1.0)?;
        let proj = Linear::new(ps, "sen.image.proj", f, embed_dim)?;
        Ok(Self {
            backbone,
            feat_mean,
            feat_std,
            proj,
            frozen,
        })
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Backbone output; detached when the backbone is frozen.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.backbone.features(images)?;
        Ok(if self.frozen { f.detach() } else { f })
    }

    /// Standardizes raw backbone features and projects them into the common space.
    pub fn embed_features(&self, features: &Tensor) -> Result<Tensor> {
        let x = features
            .broadcast_sub(self.feat_mean.as_tensor())?
            .broadcast_div(self.feat_std.as_tensor())?;
        self.proj.forward(&x)
    }

    /// Sets feature standardization from a `[n, F]` sample of raw features.
    pub fn fit_feature_statistics(&self, features: &Tensor) -> Result<()> {
        let mean = features.mean_keepdim(0)?;
        let var = features.broadcast_sub(&mean)?.sqr()?.mean(0)?;
        self.feat_mean.set(&mean.squeeze(0)?)?;
        self.feat_std.set(&var.sqrt()?.clamp(1e-6, f64::INFINITY)?)?;
        Ok(())
    }

    /// `[B, 3, S, S] -> [B, D]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.embed_features(&self.features(images)?)
    }
}

/// Conv1d x2, BiGRU x2, additive attention pooling, linear map to `D`.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    convs: [Conv1d; 2],
    grus: [BiGru; 2],
    att_proj: Linear,
    att_score: Linear,
    out: Linear,
}

impl SpeechEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &SenConfig, num_mel: usize) -> Result<Self> {
        let c = cfg.conv_channels;
        let h = cfg.gru_hidden;
        Ok(Self {
            convs: [
                Conv1d::new(ps, "sen.speech.conv0", num_mel, c, cfg.conv_kernel)?,
                Conv1d::new(ps, "sen.speech.conv1", c, c, cfg.conv_kernel)?,
            ],
            grus: [
                BiGru::new(ps, "sen.speech.gru0", c, h)?,
                BiGru::new(ps, "sen.speech.gru1", 2 * h, h)?,
            ],
            att_proj: Linear::new(ps, "sen.speech.att.proj", 2 * h, cfg.attention_dim)?,
            att_score: Linear::new(ps, "sen.speech.att.score", cfg.attention_dim, 1)?,
            out: Linear::new(ps, "sen.speech.out", 2 * h, cfg.embed_dim)?,
        })
    }

    /// Encodes already-standardized `[B, T, M]` features. Frames at or past
    /// each true length are zeroed and excluded from pooling.
    pub fn encode(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        check_lengths(lengths, b, t)?;
        let mask = length_mask(lengths, t, x.dtype(), x.device())?;
        let time_mask = mask.unsqueeze(1)?;
        let mut h = x.broadcast_mul(&mask.unsqueeze(2)?)?.transpose(1, 2)?.contiguous()?;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?.broadcast_mul(&time_mask)?;
        }
        let mut h = h.transpose(1, 2)?.contiguous()?;
        for gru in &self.grus {
            h = gru.forward(&h, &mask)?;
        }
        let scores = self.att_score.forward(&self.att_proj.forward(&h)?.tanh()?)?.squeeze(D::Minus1)?;
        let alpha = masked_softmax(&scores, &mask)?;
        let pooled = h.broadcast_mul(&alpha.unsqueeze(2)?)?.sum(1)?;
        self.out.forward(&pooled)
    }
}

fn check_lengths(lengths: &[usize], batch: usize, frames: usize) -> Result<()> {
    if lengths.len() != batch {
        return Err(Error::Shape(format!("{} lengths for a batch of {batch}", lengths.len())));
    }
    if let Some(i) = lengths.iter().position(|&l| l == 0) {
        return Err(Error::Validation(format!("utterance {i} has true length 0")));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > frames) {
        return Err(Error::Validation(format!("true length {l} exceeds padded length {frames}")));
    }
    Ok(())
}

/// Both encoders, the class heads and the input standardization statistics.
pub struct SenModel {
    pub config: SenConfig,
    pub num_classes: usize,
    pub num_mel: usize,
    params: ParamStore,
    image: ImageEncoder,
    speech: SpeechEncoder,
    speech_head: Linear,
    image_head: Linear,
}

impl SenModel {
    pub fn new(config: SenConfig, num_classes: usize, num_mel: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut params = ParamStore::new(seed, DType::F32);
        params.constant("sen.norm.mean", &[num_mel], 0.0)?;
        params.constant("sen.norm.std", &[num_mel], 1.0)?;
        let backbone = ConvFeatureNet::new(&mut params, "sen.backbone", config.backbone.clone())?;
        let image = ImageEncoder::new(&mut params, Box::new(backbone), config.embed_dim, config.freeze_backbone)?;
        let speech = SpeechEncoder::new(&mut params, &config, num_mel)?;
        let speech_head = Linear::new(&mut params, "sen.head.speech", config.embed_dim, num_classes)?;
        let image_head = Linear::new(&mut params, "sen.head.image", config.embed_dim, num_classes)?;
        Ok(Self {
            config,
            num_classes,
            num_mel,
            params,
            image,
            speech,
            speech_head,
            image_head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Parameter name prefixes the optimizer updates.
    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        let mut p = vec!["sen.image.", "sen.speech.", "sen.head."];
        if !self.image.is_frozen() {
            p.push("sen.backbone.");
        }
        p
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn speech_encoder(&self) -> &SpeechEncoder {
        &self.speech
    }

    /// Sets the per-channel statistics used to standardize log-Mel input.
    pub fn set_normalization(&self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != self.num_mel || std.len() != self.num_mel {
            return Err(Error::Shape(format!("normalization needs {} channels", self.num_mel)));
        }
        let dev = Device::Cpu;
        let floor: Vec<f32> = std.iter().map(|s| s.max(1e-3)).collect();
        self.norm_var("mean").set(&Tensor::new(mean, &dev)?)?;
        self.norm_var("std").set(&Tensor::new(floor.as_slice(), &dev)?)?;
        Ok(())
    }

    fn norm_var(&self, which: &str) -> &Var {
        self.params.get(&format!("sen.norm.{which}")).expect("registered in new")
    }

    /// `[B, T, M]` padded log-Mel batch to `[B, D]` speech embeddings.
    pub fn embed_speech(&self, batch: &SpeechBatch) -> Result<Tensor> {
        let (_, _, m) = batch.features.dims3()?;
        if m != self.num_mel {
            return Err(Error::Shape(format!("model expects {} Mel bins, got {m}", self.num_mel)));
        }
        let x = batch
            .features
            .to_dtype(DType::F32)?
            .broadcast_sub(self.norm_var("mean").as_tensor())?
            .broadcast_div(self.norm_var("std").as_tensor())?;
        self.speech.encode(&x, &batch.lengths)
    }

    /// Single-utterance encoding of a possibly padded spectrogram.
    pub fn encode_speech(&self, spec: &Spectrogram, true_length: usize) -> Result<Tensor> {
        if true_length == 0 {
            return Err(Error::Validation("true length must be positive".into()));
        }
        if true_length > spec.num_frames() {
            return Err(Error::Validation(format!(
                "true length {true_length} exceeds padded length {}",
                spec.num_frames()
            )));
        }
        let mut batch = pad_spectrograms(&[spec], 0.0, 0, &Device::Cpu)?;
        batch.lengths = vec![true_length];
        Ok(self.embed_speech(&batch)?.squeeze(0)?)
    }

    /// `[B, 3, S, S]` images to `[B, D]`.
    pub fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        self.image.encode(&images.to_dtype(DType::F32)?)
    }

    pub fn speech_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.speech_head.forward(embeddings)
    }

    pub fn image_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.image_head.forward(embeddings)
    }

    /// Metadata every SEN checkpoint carries.
    pub fn metadata(&self, frontend: &FrontendConfig) -> Result<BTreeMap<String, String>> {
        Ok(BTreeMap::from([
            ("sen_config".to_string(), serde_json::to_string(&self.config)?),
            ("num_classes".to_string(), self.num_classes.to_string()),
            ("num_mel".to_string(), self.num_mel.to_string()),
            ("frontend".to_string(), serde_json::to_string(frontend)?),
        ]))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, FrontendConfig)> {
        ck.expect_kind(SEN_CHECKPOINT_KIND)?;
        let config: SenConfig = serde_json::from_str(ck.meta("sen_config")?)?;
        let num_classes = parse_meta(ck, "num_classes")?;
        let num_mel = parse_meta(ck, "num_mel")?;
        let frontend: FrontendConfig = serde_json::from_str(ck.meta("frontend")?)?;
        let model = Self::new(config, num_classes, num_mel, 0)?;
        model.params.load_from(&ck.tensors)?;
        Ok((model, frontend))
    }

    pub fn load(path: &Path) -> Result<(Self, FrontendConfig)> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

pub(crate) fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta(key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata {key} is malformed")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SenConfig {
        SenConfig {
            embed_dim: 8,
            conv_channels: 6,
            gru_hidden: 5,
            attention_dim: 4,
            backbone: ConvFeatureConfig {
                input_size: 32,
                work_size: 16,
                channels: vec![4],
            },
            ..SenConfig::ci()
        }
    }

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize, mel: usize) -> Spectrogram {
        let data = (0..frames * mel).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        Spectrogram::new(data, frames, mel).unwrap()
    }

    fn padded(spec: &Spectrogram, to: usize, fill: f32) -> Spectrogram {
        let mut data = spec.data().to_vec();
        data.resize(to * spec.num_mel(), fill);
        Spectrogram::new(data, to, spec.num_mel()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn speech_embedding_ignores_padding() {
        let model = SenModel::new(tiny(), 3, 7, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_spec(&mut rng, 11, 7);
        let a = model.encode_speech(&padded(&spec, 15, 9.0), 11).unwrap();
        let b = model.encode_speech(&padded(&spec, 30, -4.0), 11).unwrap();
        assert_eq!(a.dims(), &[8]);
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn batch_rows_match_single_items() {
        let model = SenModel::new(tiny(), 3, 7, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let specs: Vec<Spectrogram> = [4, 9, 6].iter().map(|&f| random_spec(&mut rng, f, 7)).collect();
        let refs: Vec<&Spectrogram> = specs.iter().collect();
        let batch = pad_spectrograms(&refs, -23.0, 0, &Device::Cpu).unwrap();
        let out = model.embed_speech(&batch).unwrap();
        for (i, s) in specs.iter().enumerate() {
            let single = model.encode_speech(s, s.num_frames()).unwrap();
            assert!(max_abs_diff(&out.get(i).unwrap(), &single) <= 1e-5);
        }
    }

    #[test]
    fn zero_length_and_wrong_resolution_are_rejected() {
        let model = SenModel::new(tiny(), 3, 7, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = random_spec(&mut rng, 5, 7);
        assert!(model.encode_speech(&spec, 0).is_err());
        assert!(model.encode_speech(&spec, 6).is_err());
        let img = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let err = model.embed_images(&img).unwrap_err().to_string();
        assert!(err.contains("32x32"), "{err}");
    }

    #[test]
    fn image_embedding_is_deterministic() {
        let model = SenModel::new(tiny(), 3, 7, 4).unwrap();
        let img = Tensor::rand(-1f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let a = model.embed_images(&img).unwrap();
        let b = model.embed_images(&img).unwrap();
        assert_eq!(a.dims(), &[2, 8]);
        assert_eq!(max_abs_diff(&a, &b), 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(SenModel::new(tiny(), 1, 7, 0).is_err());
    }
}
