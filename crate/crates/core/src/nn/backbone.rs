use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::ops::{avg_pool, leaky_relu};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Image feature extractor: anything mapping `[B, 3, S, S]` to `[B, F]`.
pub trait FeatureBackbone {
    fn input_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvFeatureConfig {
    /// Expected input side length.
    pub input_size: usize,
    /// Inputs are average-pooled down to this side length first.
    pub work_size: usize,
    /// Output channels of successive stride-2 3x3 convolutions.
    pub channels: Vec<usize>,
}

impl Default for ConvFeatureConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            work_size: 64,
            channels: vec![16, 32, 64],
        }
    }
}

/// Small convolutional feature network: pool, stride-2 convolutions with
/// leaky ReLU, global average pooling.
#[derive(Debug, Clone)]
pub struct ConvFeatureNet {
    config: ConvFeatureConfig,
    convs: Vec<Conv2d>,
}

impl ConvFeatureNet {
    pub fn new(ps: &mut ParamStore, name: &str, config: ConvFeatureConfig) -> Result<Self> {
        if config.channels.is_empty() {
            return Err(Error::Config("backbone needs at least one convolution".into()));
        }
        if config.work_size == 0 || config.input_size % config.work_size != 0 {
            return Err(Error::Config(format!(
                "backbone work size {} must divide input size {}",
                config.work_size, config.input_size
            )));
        }
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(ps, &format!("{name}.conv{i}"), in_ch, out, 3, 2, 1)?);
            in_ch = out;
        }
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &ConvFeatureConfig {
        &self.config
    }
}

impl FeatureBackbone for ConvFeatureNet {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn feature_dim(&self) -> usize {
        *self.config.channels.last().expect("validated non-empty")
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "backbone expects {s}x{s} RGB input, got {c}x{h}x{w}"
            )));
        }
        let mut x = avg_pool(images, s / self.config.work_size)?;
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        Ok(x.mean(3)?.mean(2)?)
    }
}
