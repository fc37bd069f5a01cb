//! Relation supervisor: classifies how two images relate.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ops::{avg_pool, leaky_relu};
use crate::nn::{Conv2d, Linear, ParamStore};

/// Relation classes: same class, different class, identical image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationLabel {
    Positive = 0,
    Negative = 1,
    Undesired = 2,
}

pub const NUM_RELATIONS: usize = 3;

#[derive(Debug, Clone)]
pub struct RelationSupervisor {
    convs: Vec<Conv2d>,
    classifier: Linear,
    input_size: usize,
    pool: usize,
    feature_dim: usize,
}

impl RelationSupervisor {
    pub fn new(ps: &mut ParamStore, name: &str, input_size: usize, channels: usize) -> Result<Self> {
        let work = input_size.min(32);
        if input_size % work != 0 || work < 8 {
            return Err(Error::Config(format!("relation supervisor cannot take {input_size}px input")));
        }
        let widths = [channels, 2 * channels, 2 * channels];
        let mut convs = Vec::new();
        let mut ch = 3;
        for (k, &out) in widths.iter().enumerate() {
            convs.push(Conv2d::new(ps, &format!("{name}.enc{k}"), ch, out, 3, 2, 1)?);
            ch = out;
        }
        Ok(Self {
            classifier: Linear::new(ps, &format!("{name}.cls"), 2 * ch, NUM_RELATIONS)?,
            convs,
            input_size,
            pool: input_size / work,
            feature_dim: ch,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn relation_dim(&self) -> usize {
        2 * self.feature_dim
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(Error::Shape(format!(
                "relation supervisor expects {0}x{0} images, got {c}x{h}x{w}",
                self.input_size
            )));
        }
        let mut x = avg_pool(images, self.pool)?;
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        Ok(x.mean(3)?.mean(2)?)
    }

    /// `[B, relation_dim]`: absolute difference and product of the two image
    /// codes. The absolute value lets a linear head tell an exact copy from a
    /// close same-class neighbour.
    pub fn relation_vector(&self, anchor: &Tensor, other: &Tensor) -> Result<Tensor> {
        let fa = self.encode(anchor)?;
        let fb = self.encode(other)?;
        Ok(Tensor::cat(&[(&fa - &fb)?.abs()?, (&fa * &fb)?], 1)?)
    }

    /// Relation logits `[B, 3]` for a pair of image batches.
    pub fn logits(&self, anchor: &Tensor, other: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.relation_vector(anchor, other)?)
    }

    pub fn classify_vector(&self, relation: &Tensor) -> Result<Tensor> {
        self.classifier.forward(relation)
    }
}
