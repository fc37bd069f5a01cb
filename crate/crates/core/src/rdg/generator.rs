//! Stacked generator: an initial stage from noise and condition, then
//! refinement stages that double resolution.

use candle_core::Tensor;

use super::config::RdgConfig;
use crate::error::{Error, Result};
use crate::nn::ops::{leaky_relu, pixel_norm, replicate_spatial, upsample};
use crate::nn::{Conv2d, Linear, ParamStore};

const SLOPE: f64 = 0.2;

/// Hidden features `h_i` and images `I_i = G_i(h_i)`, one per scale.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub hidden: Vec<Tensor>,
    pub images: Vec<Tensor>,
}

impl ImagePyramid {
    pub fn final_image(&self) -> &Tensor {
        self.images.last().expect("at least one scale")
    }
}

#[derive(Debug, Clone)]
struct Refine {
    joint: Conv2d,
    up: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Generator {
    fc: Linear,
    base_channels: usize,
    initial: Vec<Conv2d>,
    refine: Vec<Refine>,
    to_rgb: Vec<Conv2d>,
    dense: bool,
    ca_dim: usize,
    z_dim: usize,
    scales: Vec<usize>,
}

fn act(x: &Tensor) -> Result<Tensor> {
    pixel_norm(&leaky_relu(x, SLOPE)?)
}

impl Generator {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &RdgConfig) -> Result<Self> {
        cfg.validate()?;
        let ngf = cfg.ngf;
        let base_channels = 8 * ngf;
        let fc = Linear::new(ps, &format!("{name}.f0.fc"), cfg.z_dim + cfg.ca_dim, base_channels * 16)?;
        let blocks = (cfg.scales[0] / 4).trailing_zeros() as usize;
        let mut initial = Vec::with_capacity(blocks);
        let mut ch = base_channels;
        for k in 0..blocks {
            // the last block always lands on ngf so refinement stages see a fixed width
            let out = if k + 1 == blocks { ngf } else { (base_channels >> (k + 1)).max(ngf) };
            initial.push(Conv2d::new(ps, &format!("{name}.f0.up{k}"), ch, out, 3, 1, 1)?);
            ch = out;
        }
        let mut refine = Vec::new();
        for i in 1..cfg.scales.len() {
            let inputs = if cfg.flags.dense_stacking { i * ngf } else { ngf };
            refine.push(Refine {
                joint: Conv2d::new(ps, &format!("{name}.f{i}.joint"), inputs + cfg.ca_dim, ngf, 3, 1, 1)?,
                up: Conv2d::new(ps, &format!("{name}.f{i}.up"), ngf, ngf, 3, 1, 1)?,
            });
        }
        let to_rgb = (0..cfg.scales.len())
            .map(|i| Conv2d::new(ps, &format!("{name}.g{i}"), ngf, 3, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fc,
            base_channels,
            initial,
            refine,
            to_rgb,
            dense: cfg.flags.dense_stacking,
            ca_dim: cfg.ca_dim,
            z_dim: cfg.z_dim,
            scales: cfg.scales.clone(),
        })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// `h_0` from noise `[B, z]` and code `[B, ca]`.
    pub fn initial_stage(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        let (b, zd) = z.dims2()?;
        let (_, cd) = c.dims2()?;
        if zd != self.z_dim || cd != self.ca_dim {
            return Err(Error::Compatibility(format!(
                "generator expects z of {} and code of {}, got {zd} and {cd}",
                self.z_dim, self.ca_dim
            )));
        }
        let x = act(&self.fc.forward(&Tensor::cat(&[z, c], 1)?)?)?;
        let mut h = x.reshape((b, self.base_channels, 4, 4))?;
        for conv in &self.initial {
            h = act(&conv.forward(&upsample(&h, 2)?)?)?;
        }
        Ok(h)
    }

    /// Refinement stage `i >= 1`. With dense stacking it consumes every
    /// `hiddens[0..i]`, each resized to the resolution of `hiddens[i-1]`;
    /// otherwise only `hiddens[i-1]`.
    pub fn stage(&self, i: usize, hiddens: &[Tensor], c: &Tensor) -> Result<Tensor> {
        if i == 0 || i > self.refine.len() || hiddens.len() < i {
            return Err(Error::Shape(format!("stage {i} needs {i} earlier hidden features, got {}", hiddens.len())));
        }
        let prev = &hiddens[i - 1];
        let (_, _, r, _) = prev.dims4()?;
        let mut parts = Vec::with_capacity(i + 1);
        if self.dense {
            for h in &hiddens[..i] {
                let (_, _, hr, _) = h.dims4()?;
                parts.push(upsample(h, r / hr)?);
            }
        } else {
            parts.push(prev.clone());
        }
        parts.push(replicate_spatial(c, r, r)?);
        let block = &self.refine[i - 1];
        let x = act(&block.joint.forward(&Tensor::cat(&parts, 1)?)?)?;
        act(&block.up.forward(&upsample(&x, 2)?)?)
    }

    pub fn to_image(&self, i: usize, h: &Tensor) -> Result<Tensor> {
        Ok(self.to_rgb[i].forward(h)?.tanh()?)
    }

    pub fn forward(&self, z: &Tensor, c: &Tensor) -> Result<ImagePyramid> {
        let mut hidden = vec![self.initial_stage(z, c)?];
        for i in 1..self.num_scales() {
            let h = self.stage(i, &hidden, c)?;
            hidden.push(h);
        }
        let images = hidden
            .iter()
            .enumerate()
            .map(|(i, h)| self.to_image(i, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImagePyramid { hidden, images })
    }
}
