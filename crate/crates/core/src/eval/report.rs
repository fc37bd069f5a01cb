//! Labelled image directories, feature caches and the metric report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{extract, EvalBackbone, Provenance};
use super::metrics::{fid, inception_score, retrieval_map};
use crate::data::images::load_source_image;
use crate::data::{Corpus, ImageArray, Split};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint};

pub const FEATURE_CACHE_KIND: &str = "features";

/// Class id from a file name of the form `c<digits>_...`.
pub fn class_from_name(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() || !rest[digits.len()..].starts_with('_') {
        return None;
    }
    digits.parse().ok()
}

/// PNG files of a directory, sorted by name, with classes from their names.
#[derive(Debug, Clone)]
pub struct LabelledImages {
    pub paths: Vec<PathBuf>,
    pub images: Vec<ImageArray>,
    pub classes: Vec<usize>,
}

impl LabelledImages {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Validation(format!("{} holds no PNG images", dir.display())));
        }
        let mut images = Vec::with_capacity(paths.len());
        let mut classes = Vec::with_capacity(paths.len());
        for p in &paths {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let class = class_from_name(name).ok_or_else(|| {
                Error::Validation(format!("{}: file name must start with c<class>_", p.display()))
            })?;
            images.push(ImageArray::from_rgb(&load_source_image(p)?)?);
            classes.push(class);
        }
        Ok(Self { paths, images, classes })
    }

    /// The `split` images of a corpus at `size` px, in manifest order.
    pub fn from_corpus(corpus: &Corpus, split: Split, size: usize) -> Result<Self> {
        let idx = corpus.indices(split);
        if idx.is_empty() {
            return Err(Error::Validation(format!("corpus has no {split:?} samples")));
        }
        let mut out = Self {
            paths: Vec::with_capacity(idx.len()),
            images: Vec::with_capacity(idx.len()),
            classes: Vec::with_capacity(idx.len()),
        };
        for i in idx {
            let s = &corpus.samples[i];
            out.paths.push(corpus.manifest.entries[i].image_path.clone());
            out.images.push(match s.images.at(size) {
                Some(img) => img.clone(),
                None => s.image(256)?.resized(size),
            });
            out.classes.push(s.class_id);
        }
        Ok(out)
    }
}

/// Backbone outputs for a labelled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub backbone: String,
    pub probabilities: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
}

impl FeatureSet {
    pub fn compute(backbone: &dyn EvalBackbone, images: &[ImageArray], classes: &[usize]) -> Result<Self> {
        if images.len() != classes.len() {
            return Err(Error::Shape("one class per image required".into()));
        }
        let (probabilities, features) = extract(backbone, images)?;
        Ok(Self {
            backbone: backbone.name(),
            probabilities,
            features,
            classes: classes.to_vec(),
        })
    }

    /// Writes float32 matrices to a versioned container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let classes: Vec<u32> = self.classes.iter().map(|&c| c as u32).collect();
        let n = classes.len();
        let extra = BTreeMap::from([
            ("probabilities".to_string(), rows_to_tensor(&self.probabilities)?),
            ("features".to_string(), rows_to_tensor(&self.features)?),
            ("classes".to_string(), Tensor::from_vec(classes, n, &Device::Cpu)?),
        ]);
        let meta = BTreeMap::from([("backbone".to_string(), self.backbone.clone())]);
        save_checkpoint(path, FEATURE_CACHE_KIND, &meta, &[], &extra)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(FEATURE_CACHE_KIND)?;
        let get = |k: &str| {
            ck.tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
        };
        let rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2()?) };
        let set = Self {
            backbone: ck.meta("backbone")?.to_string(),
            probabilities: rows(get("probabilities")?)?,
            features: rows(get("features")?)?,
            classes: get("classes")?.to_vec1::<u32>()?.into_iter().map(|c| c as usize).collect(),
        };
        if set.probabilities.len() != set.classes.len() || set.features.len() != set.classes.len() {
            return Err(Error::Checkpoint(format!("{}: row counts disagree", path.display())));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneStamp {
    pub name: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub splits: usize,
    pub queries_per_class: usize,
    pub query_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            splits: 10,
            queries_per_class: 2,
            query_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub map: f64,
    pub backbone: BackboneStamp,
    pub settings: EvalSettings,
    pub num_real: usize,
    pub num_fake: usize,
    /// Free-form echo of the experiment configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

impl MetricReport {
    /// Checks the value ranges a well-formed report must satisfy.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.fid.is_finite() && self.fid >= 0.0) {
            bad.push(format!("fid {} must be finite and >= 0", self.fid));
        }
        if !(0.0..=1.0).contains(&self.map) {
            bad.push(format!("map {} outside [0, 1]", self.map));
        }
        if !(self.is_mean >= 1.0 - 1e-9) || !(self.is_std >= 0.0) {
            bad.push(format!("inception score {} +- {} is invalid", self.is_mean, self.is_std));
        }
        if self.settings.splits == 0 || self.settings.queries_per_class == 0 {
            bad.push("splits and queries_per_class must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// All three metrics: IS over fakes, FID fakes vs reals, mAP of real queries over fakes.
pub fn evaluate(
    real: &FeatureSet,
    fake: &FeatureSet,
    provenance: Provenance,
    settings: &EvalSettings,
) -> Result<MetricReport> {
    if real.backbone != fake.backbone {
        return Err(Error::Compatibility(format!(
            "features come from different backbones: {} vs {}",
            real.backbone, fake.backbone
        )));
    }
    let (is_mean, is_std) = inception_score(&fake.probabilities, settings.splits)?;
    let fid = fid(&real.features, &fake.features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.query_seed);
    let map = retrieval_map(
        &real.features,
        &real.classes,
        &fake.features,
        &fake.classes,
        settings.queries_per_class,
        &mut rng,
    )?;
    let report = MetricReport {
        is_mean,
        is_std,
        fid,
        map,
        backbone: BackboneStamp {
            name: real.backbone.clone(),
            provenance,
        },
        settings: settings.clone(),
        num_real: real.classes.len(),
        num_fake: fake.classes.len(),
        config: None,
    };
    report.validate()?;
    Ok(report)
}
