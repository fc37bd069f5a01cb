//! Experiment configuration: one TOML document with a section per stage.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! manifest = "corpus/manifest.tsv"
//!
//! [sen]
//! embed_dim = 64
//!
//! [rdg]
//! scales = [64]
//!
//! [rdg.flags]
//! relation_supervisor = false
//!
//! [eval]
//! splits = 10
//! ```
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FrontendConfig;
use crate::error::{Error, Result};
use crate::eval::DeskClassifierConfig;
use crate::rdg::RdgConfig;
use crate::sen::SenConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Corpus manifest; relative paths resolve against the data root.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Only `desk` is built in.
    pub backbone: String,
    pub splits: usize,
    pub queries_per_class: usize,
    pub query_seed: u64,
    /// Generated images per test caption in the retrieval gallery.
    pub fakes_per_caption: usize,
    pub desk: DeskClassifierConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            backbone: "desk".into(),
            splits: 10,
            queries_per_class: 2,
            query_seed: 0,
            fakes_per_caption: 1,
            desk: DeskClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub frontend: FrontendConfig,
    pub sen: SenConfig,
    pub rdg: RdgConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            frontend: FrontendConfig::default(),
            sen: SenConfig::default(),
            rdg: RdgConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small-budget profile: 64 px stack, narrow networks, short schedules.
    pub fn ci() -> Self {
        Self {
            sen: SenConfig::ci(),
            rdg: RdgConfig::ci(),
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(Self::default()),
            "ci" => Ok(Self::ci()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected default or ci)"))),
        }
    }

    /// Parses and validates. Keys absent from `text` come from `base`.
    pub fn from_toml_with_base(text: &str, base: &Self) -> Result<Self> {
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_base(text, &Self::default())
    }

    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_base(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [self.frontend.validate(), self.sen.validate(), self.rdg.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        let e = &self.eval;
        if e.backbone != "desk" {
            problems.push(format!("eval.backbone {:?} is not available (only \"desk\")", e.backbone));
        }
        if e.splits == 0 || e.queries_per_class == 0 || e.fakes_per_caption == 0 {
            problems.push("eval.splits, eval.queries_per_class and eval.fakes_per_caption must be positive".into());
        }
        if e.desk.input_size > self.rdg.final_scale() {
            problems.push(format!(
                "eval.desk.input_size {} exceeds the final generated scale {}",
                e.desk.input_size,
                self.rdg.final_scale()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::ci();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn overlay_keeps_base_values() {
        let c = ExperimentConfig::from_toml_with_base("seed = 9\n[rdg.flags]\nrelation_supervisor = false\n", &ExperimentConfig::ci())
            .unwrap();
        assert_eq!(c.seed, 9);
        assert!(!c.rdg.flags.relation_supervisor);
        assert!(c.rdg.flags.dense_stacking);
        assert_eq!(c.rdg.scales, vec![64]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sede = 1", "[sen]\nembed = 3", "[bogus]\nx = 1", "[rdg.flags]\ndense = true"] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_reported_together() {
        let err = ExperimentConfig::from_toml("[sen]\nembed_dim = 0\n[eval]\nsplits = 0\nbackbone = \"inception\"").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("splits") && msg.contains("inception"), "{msg}");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::ci();
        let mut b = a.clone();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.seed = 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }
}
