//! Alternating discriminator / generator training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ca::{ConditioningCode, Mode};
use super::discriminator::DiscriminatorOutput;
use super::generator::ImagePyramid;
use super::loss::{discriminator_loss, generator_loss, relation_real_terms, relation_supervisor_loss, GeneratorLoss, RelationSet};
use super::model::{RdgModel, DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES, RDG_CHECKPOINT_KIND};
use crate::data::images::{images_to_tensor, mosaic, tensor_to_images};
use crate::data::{corpus_hash, Corpus, ImageArray, PairedSample, RelationSampler, Split};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, AdamConfig};
use crate::sen::model::parse_meta;
use crate::sen::train::{epoch_rng, image_at};
use crate::sen::{speech_embeddings, SenModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdgHistoryRow {
    pub step: usize,
    pub l_g: f64,
    /// Per-scale discriminator losses; zero for scales the stack lacks.
    pub l_d: [f64; 3],
    pub l_rs: f64,
    pub kl: f64,
    pub d_saturation: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RdgTrainOptions {
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    /// Sample grids go here as `samples_step{N}.png`.
    pub samples_dir: Option<PathBuf>,
    pub resume: bool,
    pub stop_after_epochs: Option<usize>,
    pub extra_metadata: BTreeMap<String, String>,
}

pub struct RdgTrainOutcome {
    pub model: RdgModel,
    pub history: Vec<RdgHistoryRow>,
    pub epochs_completed: usize,
    pub conditions: Tensor,
}

/// Raw condition for every corpus sample, in corpus order: the frozen
/// speech embedding, or the mean log-Mel frame when embeddings are off.
pub fn corpus_conditions(corpus: &Corpus, sen: Option<&SenModel>, use_sen: bool) -> Result<Tensor> {
    let samples: Vec<&PairedSample> = corpus.samples.iter().collect();
    if use_sen {
        let sen = sen.ok_or_else(|| Error::Validation("speech embeddings requested but no SEN model supplied".into()))?;
        let floor = corpus.frontend.log_floor.ln() as f32;
        return speech_embeddings(sen, &samples, floor);
    }
    let m = samples
        .first()
        .map(|s| s.spectrogram.num_mel())
        .ok_or_else(|| Error::Validation("empty corpus".into()))?;
    let flat: Vec<f32> = samples.iter().flat_map(|s| s.spectrogram.mean_frame()).collect();
    Ok(Tensor::from_vec(flat, (samples.len(), m), &Device::Cpu)?)
}

pub fn write_rdg_history(path: &Path, rows: &[RdgHistoryRow]) -> Result<()> {
    let mut s = String::from("step,L_G,L_D0,L_D1,L_D2,L_RS,kl,d_saturation\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.l_g, r.l_d[0], r.l_d[1], r.l_d[2], r.l_rs, r.kl, r.d_saturation
        )
        .expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar()?)
}

fn stack_images(samples: &[&PairedSample], scale: usize) -> Result<Tensor> {
    let imgs = samples.iter().map(|s| image_at(s, scale)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageArray> = imgs.iter().collect();
    images_to_tensor(&refs, &Device::Cpu)
}

fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

/// Fixed-noise, inference-mode final-scale images for the first few held-out conditions.
pub fn sample_grid(model: &RdgModel, conditions: &Tensor, seed: u64) -> Result<Vec<ImageArray>> {
    let n = conditions.dims2()?.0.min(16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = model.sample_noise(&mut rng, n)?;
    let (_, pyramid) = model.generate(&conditions.narrow(0, 0, n)?, &z, Mode::Infer, &mut rng)?;
    tensor_to_images(pyramid.final_image())
}

/// Final-scale images for every condition row, inference mode, noise seeded by `seed`.
pub fn generate_final_images(model: &RdgModel, conditions: &Tensor, seed: u64) -> Result<Vec<ImageArray>> {
    let n = conditions.dims2()?.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = model.sample_noise(&mut rng, n)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(32) {
        let len = 32.min(n - start);
        let (_, pyramid) = model.generate(&conditions.narrow(0, start, len)?, &z.narrow(0, start, len)?, Mode::Infer, &mut rng)?;
        out.extend(tensor_to_images(pyramid.final_image())?);
    }
    Ok(out)
}

/// Discriminator objective for one batch.
pub struct DiscriminatorPhase {
    pub total: Tensor,
    pub per_scale: [f64; 3],
    pub saturated: usize,
}

/// Sum of per-scale discriminator losses plus the real-pair relation terms.
/// Fakes and the conditioning code are detached, so no gradient reaches the generator.
pub fn discriminator_phase(
    model: &RdgModel,
    reals: &[Tensor],
    pyramid: &ImagePyramid,
    code: &ConditioningCode,
    set: &RelationSet,
) -> Result<DiscriminatorPhase> {
    let c = code.c.detach();
    let mut total = Tensor::zeros((), model.dtype(), &Device::Cpu)?;
    let mut per_scale = [0.0; 3];
    let mut saturated = 0;
    for (i, d) in model.discriminators.iter().enumerate() {
        let real_out = d.forward(&reals[i], &c)?;
        let fake_out = d.forward(&pyramid.images[i].detach(), &c)?;
        let l = discriminator_loss(&real_out, &fake_out)?;
        per_scale[i] = scalar(&l.loss)?;
        saturated += l.saturated;
        total = (total + l.loss)?;
    }
    if model.config.flags.relation_supervisor {
        total = (total + relation_real_terms(&model.relation, set)?)?;
    }
    Ok(DiscriminatorPhase {
        total,
        per_scale,
        saturated,
    })
}

/// Generator objective against the current discriminators.
pub fn generator_phase(model: &RdgModel, pyramid: &ImagePyramid, code: &ConditioningCode, set: &RelationSet) -> Result<GeneratorLoss> {
    let fakes: Vec<DiscriminatorOutput> = model
        .discriminators
        .iter()
        .zip(&pyramid.images)
        .map(|(d, img)| d.forward(img, &code.c))
        .collect::<Result<_>>()?;
    let rs = if model.config.flags.relation_supervisor {
        Some(relation_supervisor_loss(&model.relation, set)?)
    } else {
        None
    };
    generator_loss(&fakes, rs.as_ref(), &code.kl, model.config.kl_weight)
}

/// Separate optimizers for the generator side and the discriminator side.
pub fn optimizers(model: &RdgModel) -> Result<(Adam, Adam)> {
    let opt_g = Adam::new(
        model.params().named_vars_with_prefix(&GENERATOR_PREFIXES),
        AdamConfig {
            lr: model.config.learning_rate_g,
            ..AdamConfig::default()
        },
    )?;
    let opt_d = Adam::new(
        model.params().named_vars_with_prefix(&DISCRIMINATOR_PREFIXES),
        AdamConfig {
            lr: model.config.learning_rate_d,
            ..AdamConfig::default()
        },
    )?;
    Ok((opt_g, opt_d))
}

pub fn train_rdg(corpus: &Corpus, sen: Option<&SenModel>, config: &super::RdgConfig, opts: &RdgTrainOptions) -> Result<RdgTrainOutcome> {
    train_rdg_with(corpus, sen, config, opts, &mut |_, _| Ok(()))
}

/// As [`train_rdg`], calling `on_epoch(epochs_completed, model)` after every epoch.
pub fn train_rdg_with(
    corpus: &Corpus,
    sen: Option<&SenModel>,
    config: &super::RdgConfig,
    opts: &RdgTrainOptions,
    on_epoch: &mut dyn FnMut(usize, &RdgModel) -> Result<()>,
) -> Result<RdgTrainOutcome> {
    config.validate()?;
    let flags = config.flags;
    let device = Device::Cpu;
    let conditions = corpus_conditions(corpus, sen, flags.use_sen_embeddings)?;
    let cond_dim = conditions.dims2()?.1;
    if let (true, Some(sen)) = (flags.use_sen_embeddings, sen) {
        if sen.config.embed_dim != cond_dim {
            return Err(Error::Compatibility(format!(
                "SEN embedding dim {} vs generator condition dim {cond_dim}",
                sen.config.embed_dim
            )));
        }
    }
    let sen_fingerprint = match (flags.use_sen_embeddings, sen) {
        (true, Some(s)) => s.params().content_hash(&[])?,
        _ => "none".to_string(),
    };

    let train_idx = corpus.indices(Split::Train);
    let train: Vec<&PairedSample> = train_idx.iter().map(|&i| &corpus.samples[i]).collect();
    let sampler = RelationSampler::new(train.iter().map(|s| s.class_id))?;
    let train_cond = select(&conditions, &train_idx)?;

    let model = RdgModel::new(config.clone(), cond_dim, opts.seed)?;
    let mean = train_cond.mean_keepdim(0)?;
    let std = train_cond.broadcast_sub(&mean)?.sqr()?.mean(0)?.sqrt()?;
    // Unit-norm embeddings have entries near 1/sqrt(D); without rescaling the
    // CA noise swamps them and the generator ignores its condition.
    model.set_condition_statistics(&mean.squeeze(0)?, &std)?;

    let (mut opt_g, mut opt_d) = optimizers(&model)?;

    let mut history: Vec<RdgHistoryRow> = Vec::new();
    let mut start_epoch = 0;
    if opts.resume {
        if let Some(path) = opts.checkpoint_path.as_ref().filter(|p| p.exists()) {
            let ck = load_checkpoint(path)?;
            ck.expect_kind(RDG_CHECKPOINT_KIND)?;
            let saved: super::RdgConfig = serde_json::from_str(ck.meta("rdg_config")?)?;
            if &saved != config {
                return Err(Error::Compatibility("checkpoint was trained with a different RDG config".into()));
            }
            if ck.meta("sen_fingerprint")? != sen_fingerprint {
                return Err(Error::Compatibility("checkpoint was trained against a different SEN model".into()));
            }
            model.params().load_from(&ck.tensors)?;
            opt_g.load_state("opt_g", &ck.tensors)?;
            opt_d.load_state("opt_d", &ck.tensors)?;
            start_epoch = parse_meta(&ck, "epoch")?;
            history = serde_json::from_str(ck.meta("history")?)?;
        }
    }

    // Real images per scale, plus final-scale images for relation pairs.
    let plain: Vec<Tensor> = config
        .scales
        .iter()
        .map(|&s| stack_images(&train, s))
        .collect::<Result<_>>()?;
    let preview_idx = {
        let test = corpus.indices(Split::Test);
        if test.is_empty() { train_idx.clone() } else { test }
    };
    let preview_cond = select(&conditions, &preview_idx)?;
    let fingerprint = corpus_hash(&corpus.manifest)?;

    let mut epochs_completed = start_epoch;
    for epoch in start_epoch..config.epochs {
        let mut rng = epoch_rng(opts.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let step = history.len();
            let b = chunk.len();
            let reals: Vec<Tensor> = if config.augment {
                let per_sample: Vec<Vec<ImageArray>> = chunk.iter().map(|&i| train[i].images.augmented(&mut rng)).collect();
                config
                    .scales
                    .iter()
                    .map(|&s| {
                        let k = train[0].images.scales().iter().position(|&x| x == s);
                        match k {
                            Some(k) => {
                                let refs: Vec<&ImageArray> = per_sample.iter().map(|v| &v[k]).collect();
                                images_to_tensor(&refs, &device)
                            }
                            None => stack_images(&chunk.iter().map(|&i| train[i]).collect::<Vec<_>>(), s),
                        }
                    })
                    .collect::<Result<_>>()?
            } else {
                plain.iter().map(|t| select(t, chunk)).collect::<Result<_>>()?
            };
            let rel = sampler.sample(chunk, &mut rng)?;
            let final_plain = plain.last().expect("non-empty scales");
            let cond = select(&train_cond, chunk)?;
            let z = model.sample_noise(&mut rng, b)?;
            let (code, pyramid) = model.generate(&cond, &z, Mode::Train, &mut rng)?;

            let set = RelationSet {
                fake: pyramid.final_image().clone(),
                ground_truth: reals.last().expect("non-empty").clone(),
                same_class: select(final_plain, &rel.same_class)?,
                mismatched: select(final_plain, &rel.mismatched)?,
            };
            let d = discriminator_phase(&model, &reals, &pyramid, &code, &set)?;
            let (d_total, l_d, mut saturation) = (d.total, d.per_scale, d.saturated);
            let d_value = scalar(&d_total)?;
            if !d_value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("discriminator loss {d_value}"),
                });
            }
            opt_d.step(&d_total.backward()?)?;

            let g = generator_phase(&model, &pyramid, &code, &set)?;
            saturation += g.saturated;
            let row = RdgHistoryRow {
                step,
                l_g: scalar(&g.total)?,
                l_d,
                l_rs: match &g.relation {
                    Some(t) => scalar(t)?,
                    None => 0.0,
                },
                kl: scalar(&g.kl)?,
                d_saturation: saturation,
            };
            if !row.l_g.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("generator loss {}", row.l_g),
                });
            }
            opt_g.step(&g.total.backward()?)?;
            model.update_ema(step)?;
            history.push(row);
        }
        epochs_completed = epoch + 1;

        if let Some(path) = &opts.checkpoint_path {
            let mut meta = model.metadata()?;
            meta.extend(opts.extra_metadata.clone());
            meta.insert("seed".into(), opts.seed.to_string());
            meta.insert("epoch".into(), epochs_completed.to_string());
            meta.insert("history".into(), serde_json::to_string(&history)?);
            meta.insert("sen_fingerprint".into(), sen_fingerprint.clone());
            meta.insert("corpus_fingerprint".into(), fingerprint.clone());
            let mut extra = opt_g.state("opt_g");
            extra.extend(opt_d.state("opt_d"));
            save_checkpoint(path, RDG_CHECKPOINT_KIND, &meta, &[model.params()], &extra)?;
        }
        if let Some(path) = &opts.history_path {
            write_rdg_history(path, &history)?;
        }
        if let Some(dir) = &opts.samples_dir {
            if config.sample_every > 0 && epochs_completed % config.sample_every == 0 {
                let grid = sample_grid(&model, &preview_cond, opts.seed)?;
                if let Some(img) = mosaic(&grid) {
                    let path = dir.join(format!("samples_step{}.png", history.len()));
                    img.save(&path)?;
                }
            }
        }
        on_epoch(epochs_completed, &model)?;
        if opts.stop_after_epochs == Some(epochs_completed) {
            break;
        }
    }
    Ok(RdgTrainOutcome {
        model,
        history,
        epochs_completed,
        conditions,
    })
}
