//! Embedding-network training loop, checkpoints and retrieval probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{distinctive_loss_tensor, mask_tensor, matching_loss_tensor};
use super::model::{SenConfig, SenModel, SEN_CHECKPOINT_KIND};
use crate::data::images::images_to_tensor;
use crate::data::{corpus_hash, pad_spectrograms, Corpus, ImageArray, PairedSample, Spectrogram, Split};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, AdamConfig};

/// One optimizer step's losses, summed over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenHistoryRow {
    pub step: usize,
    pub l_m: f64,
    pub l_d: f64,
    pub l_sen: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SenTrainOptions {
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    /// Continue from `checkpoint_path` when it exists.
    pub resume: bool,
    /// Return after this many completed epochs (counted from zero), as if interrupted.
    pub stop_after_epochs: Option<usize>,
    /// Copied into the checkpoint header verbatim.
    pub extra_metadata: BTreeMap<String, String>,
}

pub struct SenTrainOutcome {
    pub model: SenModel,
    pub history: Vec<SenHistoryRow>,
    pub epochs_completed: usize,
    pub steps_per_epoch: usize,
}

impl SenTrainOutcome {
    /// Mean batch loss over the first and the last completed epoch.
    pub fn first_and_last_epoch_loss(&self) -> Option<(f64, f64)> {
        let k = self.steps_per_epoch;
        if k == 0 || self.history.len() < k {
            return None;
        }
        let mean = |rows: &[SenHistoryRow]| rows.iter().map(|r| r.l_sen).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.history[..k]), mean(&self.history[self.history.len() - k..])))
    }
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Image at `size` px, resized from the largest stored scale when needed.
pub(crate) fn image_at(sample: &PairedSample, size: usize) -> Result<ImageArray> {
    match sample.images.at(size) {
        Some(img) => Ok(img.clone()),
        None => Ok(sample.image(256)?.resized(size)),
    }
}

/// Per-Mel-channel mean and standard deviation over every frame.
pub fn spectrogram_statistics<'a>(samples: impl IntoIterator<Item = &'a PairedSample>) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for s in samples {
        let m = s.spectrogram.num_mel();
        if sum.is_empty() {
            sum = vec![0.0; m];
            sq = vec![0.0; m];
        }
        for t in 0..s.spectrogram.num_frames() {
            for (k, &v) in s.spectrogram.frame(t).iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no frames to compute statistics from".into()));
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0)).sqrt() as f32)
        .collect();
    Ok((mean, std))
}

/// Image features for `samples`, in chunks, at the backbone's resolution.
fn backbone_features(model: &SenModel, samples: &[&PairedSample]) -> Result<Tensor> {
    let size = model.image_encoder().input_size();
    let mut parts = Vec::new();
    for chunk in samples.chunks(16) {
        let imgs = chunk.iter().map(|s| image_at(s, size)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageArray> = imgs.iter().collect();
        parts.push(model.image_encoder().features(&images_to_tensor(&refs, &Device::Cpu)?)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Speech embeddings `[n, D]` for `samples`, batched.
pub fn speech_embeddings(model: &SenModel, samples: &[&PairedSample], floor: f32) -> Result<Tensor> {
    let specs: Vec<&Spectrogram> = samples.iter().map(|s| &s.spectrogram).collect();
    spectrogram_embeddings(model, &specs, floor)
}

/// As [`speech_embeddings`] for bare spectrograms; `floor` pads short ones.
pub fn spectrogram_embeddings(model: &SenModel, specs: &[&Spectrogram], floor: f32) -> Result<Tensor> {
    if specs.is_empty() {
        return Err(Error::Validation("no utterances to embed".into()));
    }
    let mut parts = Vec::new();
    for chunk in specs.chunks(32) {
        let batch = pad_spectrograms(chunk, floor, 0, &Device::Cpu)?;
        parts.push(model.embed_speech(&batch)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Image embeddings `[n, D]` for `samples`.
pub fn image_embeddings(model: &SenModel, samples: &[&PairedSample]) -> Result<Tensor> {
    let feats = backbone_features(model, samples)?;
    Ok(model.image_encoder().embed_features(&feats)?.detach())
}

/// Fraction of speech queries whose most cosine-similar image (among the
/// same samples' images) belongs to the query's class.
pub fn retrieval_recall_at_1(model: &SenModel, corpus: &Corpus, split: Split) -> Result<f64> {
    let samples: Vec<&PairedSample> = corpus.indices(split).into_iter().map(|i| &corpus.samples[i]).collect();
    if samples.is_empty() {
        return Err(Error::Validation(format!("{split} split is empty")));
    }
    let floor = corpus.frontend.log_floor.ln() as f32;
    let a = normalize_rows(&speech_embeddings(model, &samples, floor)?)?;
    let v = normalize_rows(&image_embeddings(model, &samples)?)?;
    let sims: Vec<Vec<f32>> = a.matmul(&v.t()?)?.to_vec2()?;
    let hits = sims
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (j, &s)| if s > acc.1 { (j, s) } else { acc })
                .0;
            samples[best].class_id == samples[*i].class_id
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

pub fn write_sen_history(path: &Path, rows: &[SenHistoryRow]) -> Result<()> {
    let mut s = String::from("step,L_m,L_d,L_SEN\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.step, r.l_m, r.l_d, r.l_sen).expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains both encoders and the class heads on the train split.
pub fn train_sen(corpus: &Corpus, config: &SenConfig, opts: &SenTrainOptions) -> Result<SenTrainOutcome> {
    config.validate()?;
    let train: Vec<&PairedSample> = corpus.indices(Split::Train).into_iter().map(|i| &corpus.samples[i]).collect();
    let classes: std::collections::BTreeSet<usize> = train.iter().map(|s| s.class_id).collect();
    if classes.len() < 2 {
        return Err(Error::Validation(format!(
            "training split covers {} class(es); at least 2 are required",
            classes.len()
        )));
    }
    let num_mel = train[0].spectrogram.num_mel();
    let model = SenModel::new(config.clone(), corpus.num_classes(), num_mel, opts.seed)?;
    let (mean, std) = spectrogram_statistics(train.iter().copied())?;
    model.set_normalization(&mean, &std)?;

    let trainable = model.trainable_prefixes();
    let mut opt = Adam::new(
        model.params().named_vars_with_prefix(&trainable),
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    )?;

    let mut history: Vec<SenHistoryRow> = Vec::new();
    let mut start_epoch = 0;
    if opts.resume {
        if let Some(path) = opts.checkpoint_path.as_ref().filter(|p| p.exists()) {
            let ck = load_checkpoint(path)?;
            ck.expect_kind(SEN_CHECKPOINT_KIND)?;
            let saved: SenConfig = serde_json::from_str(ck.meta("sen_config")?)?;
            if &saved != config {
                return Err(Error::Compatibility("checkpoint was trained with a different SEN config".into()));
            }
            model.params().load_from(&ck.tensors)?;
            opt.load_state("opt", &ck.tensors)?;
            start_epoch = super::model::parse_meta(&ck, "epoch")?;
            history = serde_json::from_str(ck.meta("history")?)?;
        }
    }

    let device = Device::Cpu;
    let floor = corpus.frontend.log_floor.ln() as f32;
    let train_features = backbone_features(&model, &train)?;
    if start_epoch == 0 {
        model.image_encoder().fit_feature_statistics(&train_features)?;
    }
    let cached = model.image_encoder().is_frozen().then_some(train_features);
    let fingerprint = corpus_hash(&corpus.manifest)?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);

    let mut epochs_completed = start_epoch;
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(opts.seed, epoch));
        for chunk in order.chunks(config.batch_size) {
            let step = history.len();
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| train[i]).collect();
            let class_ids: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
            let specs: Vec<_> = batch.iter().map(|s| &s.spectrogram).collect();
            let speech = pad_spectrograms(&specs, floor, 0, &device)?;
            let a = model.embed_speech(&speech)?;
            let v = match &cached {
                Some(f) => {
                    let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &device)?;
                    model.image_encoder().embed_features(&f.index_select(&idx, 0)?)?
                }
                None => model.image_encoder().embed_features(&backbone_features(&model, &batch)?)?,
            };
            let mask = mask_tensor(&class_ids, DType::F32, &device)?;
            let (l_m, _, _) = matching_loss_tensor(&a, &v, &mask, config.beta)?;
            let l_d = distinctive_loss_tensor(&model.speech_logits(&a)?, &model.image_logits(&v)?, &class_ids)?;
            let total = (&l_m + &l_d)?;
            let row = SenHistoryRow {
                step,
                l_m: l_m.to_dtype(DType::F64)?.to_scalar()?,
                l_d: l_d.to_dtype(DType::F64)?.to_scalar()?,
                l_sen: total.to_dtype(DType::F64)?.to_scalar()?,
            };
            if !row.l_sen.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("L_m = {}, L_d = {}", row.l_m, row.l_d),
                });
            }
            opt.step(&total.backward()?)?;
            history.push(row);
        }
        epochs_completed = epoch + 1;

        if let Some(path) = &opts.checkpoint_path {
            let mut meta = model.metadata(&corpus.frontend)?;
            meta.extend(opts.extra_metadata.clone());
            meta.insert("seed".into(), opts.seed.to_string());
            meta.insert("epoch".into(), epochs_completed.to_string());
            meta.insert("history".into(), serde_json::to_string(&history)?);
            meta.insert("corpus_fingerprint".into(), fingerprint.clone());
            save_checkpoint(path, SEN_CHECKPOINT_KIND, &meta, &[model.params()], &opt.state("opt"))?;
        }
        if let Some(path) = &opts.history_path {
            write_sen_history(path, &history)?;
        }
        if opts.stop_after_epochs == Some(epochs_completed) {
            break;
        }
    }
    if let Some(path) = &opts.history_path {
        write_sen_history(path, &history)?;
    }
    Ok(SenTrainOutcome {
        model,
        history,
        epochs_completed,
        steps_per_epoch,
    })
}
