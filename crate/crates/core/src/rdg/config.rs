use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component switches used by the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Each stage sees every earlier hidden feature, not just the previous one.
    pub dense_stacking: bool,
    pub relation_supervisor: bool,
    /// When off, the condition is the mean log-Mel frame instead of a speech embedding.
    pub use_sen_embeddings: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            dense_stacking: true,
            relation_supervisor: true,
            use_sen_embeddings: true,
        }
    }
}

impl AblationFlags {
    /// Applies a named ablation (`no-rs`, `no-dense`, `no-sen`).
    pub fn ablate(mut self, name: &str) -> Result<Self> {
        match name {
            "no-rs" => self.relation_supervisor = false,
            "no-dense" => self.dense_stacking = false,
            "no-sen" => self.use_sen_embeddings = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected no-rs, no-dense or no-sen"
                )))
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdgConfig {
    pub z_dim: usize,
    pub ca_dim: usize,
    /// Generator hidden channels at every stage output.
    pub ngf: usize,
    /// Discriminator base channels.
    pub ndf: usize,
    /// Relation-supervisor encoder base channels.
    pub rs_channels: usize,
    /// Output resolutions, each double the previous; the first is at least 8.
    pub scales: Vec<usize>,
    pub kl_weight: f64,
    pub learning_rate_g: f64,
    pub learning_rate_d: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Random crop and flip on real images.
    pub augment: bool,
    /// Write a sample grid every this many epochs (0 disables).
    pub sample_every: usize,
    /// Inference uses a moving average of the generator weights with this
    /// decay (warmed up over the first steps); 0 uses the live weights.
    pub ema_decay: f64,
    pub flags: AblationFlags,
}

impl Default for RdgConfig {
    fn default() -> Self {
        Self {
            z_dim: 100,
            ca_dim: 128,
            ngf: 32,
            ndf: 64,
            rs_channels: 32,
            scales: vec![64, 128, 256],
            kl_weight: 1.0,
            learning_rate_g: 2e-4,
            learning_rate_d: 2e-4,
            batch_size: 32,
            epochs: 600,
            augment: true,
            sample_every: 10,
            ema_decay: 0.999,
            flags: AblationFlags::default(),
        }
    }
}

impl RdgConfig {
    /// 64-px-only stack with narrow layers for CI-time runs.
    pub fn ci() -> Self {
        Self {
            z_dim: 16,
            ca_dim: 16,
            ngf: 8,
            ndf: 8,
            rs_channels: 8,
            scales: vec![64],
            learning_rate_g: 1e-3,
            learning_rate_d: 1e-3,
            kl_weight: 0.0,
            batch_size: 16,
            epochs: 50,
            augment: false,
            sample_every: 10,
            ema_decay: 0.95,
            ..Self::default()
        }
    }

    pub fn final_scale(&self) -> usize {
        *self.scales.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.scales.is_empty() || self.scales.len() > 3 {
            bad.push(format!("scales must list 1 to 3 resolutions, got {:?}", self.scales));
        } else {
            let first = self.scales[0];
            if first < 8 || !first.is_power_of_two() {
                bad.push(format!("first scale must be a power of two >= 8, got {first}"));
            }
            if self.scales.windows(2).any(|w| w[1] != 2 * w[0]) {
                bad.push(format!("each scale must double the previous: {:?}", self.scales));
            }
        }
        for (name, v) in [
            ("z_dim", self.z_dim),
            ("ca_dim", self.ca_dim),
            ("ngf", self.ngf),
            ("ndf", self.ndf),
            ("rs_channels", self.rs_channels),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if !(self.kl_weight >= 0.0) {
            bad.push("kl_weight must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            bad.push(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.learning_rate_g > 0.0 && self.learning_rate_d > 0.0) {
            bad.push("learning rates must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
