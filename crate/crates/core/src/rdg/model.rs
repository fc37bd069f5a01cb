//! The full generative model: augmentation, generator stack, per-scale
//! discriminators and relation supervisor, sharing one parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use super::ca::{normal_tensor, ConditioningAugmentation, ConditioningCode, Mode};
use super::config::RdgConfig;
use super::discriminator::Discriminator;
use super::generator::{Generator, ImagePyramid};
use super::relation::RelationSupervisor;
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, Checkpoint, ParamStore};
use crate::sen::model::parse_meta;

pub const RDG_CHECKPOINT_KIND: &str = "rdg";

/// Parameters updated by the generator step.
pub const GENERATOR_PREFIXES: [&str; 2] = ["rdg.ca.", "rdg.gen."];
/// Parameters updated by the discriminator step (relation supervisor included).
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["rdg.disc", "rdg.rs."];

/// Moving-average copy of the augmentation and generator, used in `Mode::Infer`.
struct Shadow {
    ca: ConditioningAugmentation,
    generator: Generator,
    /// (live, averaged) pairs
    pairs: Vec<(Var, Var)>,
}

pub struct RdgModel {
    pub config: RdgConfig,
    pub cond_dim: usize,
    params: ParamStore,
    cond_mean: Var,
    cond_std: Var,
    pub ca: ConditioningAugmentation,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
    pub relation: RelationSupervisor,
    ema: Option<Shadow>,
}

impl RdgModel {
    pub fn new(config: RdgConfig, cond_dim: usize, seed: u64) -> Result<Self> {
        Self::with_dtype(config, cond_dim, seed, DType::F32)
    }

    pub fn with_dtype(config: RdgConfig, cond_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if cond_dim == 0 {
            return Err(Error::Config("condition dimension must be positive".into()));
        }
        let mut params = ParamStore::new(seed, dtype);
        let cond_mean = params.constant("rdg.norm.cond_mean", &[cond_dim], 0.0)?;
        let cond_std = params.constant("rdg.norm.cond_std", &[cond_dim], 1.0)?;
        let ca = ConditioningAugmentation::new(&mut params, "rdg.ca", cond_dim, config.ca_dim)?;
        let generator = Generator::new(&mut params, "rdg.gen", &config)?;
        let discriminators = config
            .scales
            .iter()
            .enumerate()
            .map(|(i, &s)| Discriminator::new(&mut params, &format!("rdg.disc{i}"), s, config.ndf, config.ca_dim))
            .collect::<Result<Vec<_>>>()?;
        let relation = RelationSupervisor::new(&mut params, "rdg.rs", config.final_scale(), config.rs_channels)?;
        // created last so the other initial weights do not depend on it
        let ema = if config.ema_decay > 0.0 {
            let ca = ConditioningAugmentation::new(&mut params, "rdg.ema.ca", cond_dim, config.ca_dim)?;
            let generator = Generator::new(&mut params, "rdg.ema.gen", &config)?;
            let mut pairs = Vec::new();
            for (name, live) in params.named_vars_with_prefix(&GENERATOR_PREFIXES) {
                let shadow_name = format!("rdg.ema.{}", &name["rdg.".len()..]);
                let avg = params
                    .get(&shadow_name)
                    .ok_or_else(|| Error::Shape(format!("no averaged copy of {name}")))?
                    .clone();
                avg.set(live.as_tensor())?;
                pairs.push((live, avg));
            }
            Some(Shadow { ca, generator, pairs })
        } else {
            None
        };
        Ok(Self {
            config,
            cond_dim,
            params,
            cond_mean,
            cond_std,
            ca,
            generator,
            discriminators,
            relation,
            ema,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Sets per-dimension standardization applied to raw conditions.
    pub fn set_condition_statistics(&self, mean: &Tensor, std: &Tensor) -> Result<()> {
        self.cond_mean.set(&mean.to_dtype(self.dtype())?)?;
        self.cond_std.set(&std.clamp(1e-6, f64::INFINITY)?.to_dtype(self.dtype())?)?;
        Ok(())
    }

    pub fn normalize_condition(&self, cond: &Tensor) -> Result<Tensor> {
        let (_, d) = cond.dims2()?;
        if d != self.cond_dim {
            return Err(Error::Compatibility(format!(
                "condition dimension {d} does not match the generator's {}",
                self.cond_dim
            )));
        }
        Ok(cond
            .to_dtype(self.dtype())?
            .broadcast_sub(self.cond_mean.as_tensor())?
            .broadcast_div(self.cond_std.as_tensor())?)
    }

    /// Moves the averaged weights toward the live ones after optimizer step
    /// `step` (counted from 0).
    pub fn update_ema(&self, step: usize) -> Result<()> {
        if let Some(shadow) = &self.ema {
            let d = self.config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            for (live, avg) in &shadow.pairs {
                avg.set(&((avg.as_tensor() * d)? + (live.as_tensor() * (1.0 - d))?)?)?;
            }
        }
        Ok(())
    }

    pub fn sample_noise<R: Rng>(&self, rng: &mut R, batch: usize) -> Result<Tensor> {
        normal_tensor(rng, (batch, self.config.z_dim), self.cond_mean.as_tensor())
    }

    /// Raw conditions `[B, cond_dim]` and noise `[B, z]` to an image pyramid.
    pub fn generate<R: Rng>(&self, cond: &Tensor, z: &Tensor, mode: Mode, rng: &mut R) -> Result<(ConditioningCode, ImagePyramid)> {
        let (zb, zd) = z.dims2()?;
        if zd != self.config.z_dim {
            return Err(Error::Compatibility(format!(
                "noise dimension {zd} does not match the generator's {}",
                self.config.z_dim
            )));
        }
        if zb != cond.dims2()?.0 {
            return Err(Error::Shape("noise and condition batch sizes differ".into()));
        }
        let (ca, generator) = match (&self.ema, mode) {
            (Some(s), Mode::Infer) => (&s.ca, &s.generator),
            _ => (&self.ca, &self.generator),
        };
        let code = ca.forward(&self.normalize_condition(cond)?, mode, rng)?;
        let pyramid = generator.forward(&z.to_dtype(self.dtype())?, &code.c)?;
        Ok((code, pyramid))
    }

    pub fn metadata(&self) -> Result<BTreeMap<String, String>> {
        Ok(BTreeMap::from([
            ("rdg_config".to_string(), serde_json::to_string(&self.config)?),
            ("flags".to_string(), serde_json::to_string(&self.config.flags)?),
            ("cond_dim".to_string(), self.cond_dim.to_string()),
        ]))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(RDG_CHECKPOINT_KIND)?;
        let config: RdgConfig = serde_json::from_str(ck.meta("rdg_config")?)?;
        let model = Self::new(config, parse_meta(ck, "cond_dim")?, 0)?;
        model.params.load_from(&ck.tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = load_checkpoint(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}
