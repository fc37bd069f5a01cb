//! Per-scale discriminator with unconditional and conditional heads.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ops::{leaky_relu, replicate_spatial, sigmoid};
use crate::nn::{Conv2d, ParamStore};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Discriminator {
    down: Vec<Conv2d>,
    uncond: Conv2d,
    cond_joint: Conv2d,
    cond: Conv2d,
    scale: usize,
}

/// Probabilities of "real" from both heads, each `[B]`.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub unconditional: Tensor,
    pub conditional: Tensor,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, name: &str, scale: usize, ndf: usize, ca_dim: usize) -> Result<Self> {
        if scale < 8 || !scale.is_power_of_two() {
            return Err(Error::Config(format!("discriminator scale {scale} must be a power of two >= 8")));
        }
        let layers = (scale / 4).trailing_zeros() as usize;
        let mut down = Vec::with_capacity(layers);
        let mut ch = 3;
        for k in 0..layers {
            let out = ndf << k.min(3);
            down.push(Conv2d::new(ps, &format!("{name}.down{k}"), ch, out, 4, 2, 1)?);
            ch = out;
        }
        Ok(Self {
            uncond: Conv2d::new(ps, &format!("{name}.uncond"), ch, 1, 4, 1, 0)?,
            cond_joint: Conv2d::new(ps, &format!("{name}.cond_joint"), ch + ca_dim, ch, 3, 1, 1)?,
            cond: Conv2d::new(ps, &format!("{name}.cond"), ch, 1, 4, 1, 0)?,
            down,
            scale,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.scale || w != self.scale {
            return Err(Error::Shape(format!(
                "discriminator for {0}x{0} got {c}x{h}x{w}",
                self.scale
            )));
        }
        let mut x = images.clone();
        for conv in &self.down {
            x = leaky_relu(&conv.forward(&x)?, SLOPE)?;
        }
        Ok(x)
    }

    pub fn forward(&self, images: &Tensor, c: &Tensor) -> Result<DiscriminatorOutput> {
        let f = self.features(images)?;
        let unconditional = sigmoid(&self.uncond.forward(&f)?.flatten_all()?)?;
        let joint = Tensor::cat(&[&f, &replicate_spatial(c, 4, 4)?], 1)?;
        let j = leaky_relu(&self.cond_joint.forward(&joint)?, SLOPE)?;
        let conditional = sigmoid(&self.cond.forward(&j)?.flatten_all()?)?;
        Ok(DiscriminatorOutput {
            unconditional,
            conditional,
        })
    }
}
