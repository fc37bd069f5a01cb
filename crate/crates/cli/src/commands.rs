use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use s2ig_core::config::ExperimentConfig;
use s2ig_core::data::audio::read_wav;
use s2ig_core::data::{corpus_hash, load_manifest, make_synthetic_corpus, Corpus, FrontendConfig, LogMelExtractor, Spectrogram, Split, SyntheticCorpusSpec};
use s2ig_core::eval::{class_from_name, evaluate as score, DeskClassifier, EvalBackbone, EvalSettings, FeatureSet, LabelledImages, Provenance};
use s2ig_core::experiment::ExperimentDir;
use s2ig_core::nn::{file_hash, load_checkpoint};
use s2ig_core::rdg::{generate_pyramids, spectrogram_conditions, train_rdg as fit_rdg, RdgModel, RdgTrainOptions};
use s2ig_core::sen::{retrieval_recall_at_1, train_sen as fit_sen, SenModel, SenTrainOptions};
use s2ig_core::{Error, Result};

use crate::{ConfigArgs, EvaluateArgs, GenerateArgs, MakeDatasetArgs, RunArgs, TrainRdgArgs, TrainSenArgs};

pub struct Roots {
    pub data: PathBuf,
    pub experiments: PathBuf,
}

impl Roots {
    fn data_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data.join(p)
        }
    }
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::profile(&a.profile)?;
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p, &base)?,
        None => base,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(roots: &Roots, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.data
        .manifest
        .as_deref()
        .map(|m| roots.data_path(m))
        .ok_or_else(|| Error::Config("no corpus manifest: pass --manifest or set data.manifest".into()))
}

fn config_echo(cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    Ok(BTreeMap::from([
        ("experiment_config".to_string(), cfg.to_toml()?),
        ("config_fingerprint".to_string(), cfg.fingerprint()?),
    ]))
}

fn open_run(roots: &Roots, run: &RunArgs, cfg: &ExperimentConfig) -> Result<ExperimentDir> {
    let dir = match &run.exp_dir {
        Some(d) => ExperimentDir::open(d)?,
        None => ExperimentDir::create(&roots.experiments, &run.name)?,
    };
    dir.write_config(&cfg.to_toml()?)?;
    Ok(dir)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(Error::Config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn make_dataset(roots: &Roots, a: MakeDatasetArgs) -> Result<()> {
    let spec = SyntheticCorpusSpec {
        seed: a.seed,
        num_classes: a.classes,
        images_per_class: a.per_class,
    };
    let manifest = make_synthetic_corpus(&spec, &roots.data_path(&a.out))?;
    let hash = corpus_hash(&load_manifest(&manifest)?)?;
    println!("manifest: {}", manifest.display());
    println!("corpus_hash: {hash}");
    Ok(())
}

pub fn train_sen(roots: &Roots, a: TrainSenArgs) -> Result<()> {
    let cfg = load_config(&a.run.config)?;
    let manifest = manifest_path(roots, &cfg)?;
    let dir = open_run(roots, &a.run, &cfg)?;
    let corpus = Corpus::load(load_manifest(&manifest)?, &cfg.frontend, false)?;
    let opts = SenTrainOptions {
        seed: cfg.seed,
        checkpoint_path: Some(dir.checkpoint("sen")),
        history_path: Some(dir.history("sen")),
        resume: a.run.resume,
        stop_after_epochs: None,
        extra_metadata: config_echo(&cfg)?,
    };
    let out = fit_sen(&corpus, &cfg.sen, &opts)?;
    println!("experiment: {}", dir.root().display());
    println!("checkpoint: {}", dir.checkpoint("sen").display());
    println!("epochs: {}", out.epochs_completed);
    if let Some((first, last)) = out.first_and_last_epoch_loss() {
        println!("L_SEN: {first:.4} -> {last:.4}");
    }
    if !corpus.indices(Split::Test).is_empty() {
        println!("test recall@1: {:.3}", retrieval_recall_at_1(&out.model, &corpus, Split::Test)?);
    }
    Ok(())
}

fn dims_mismatch(sen: &SenModel, cond_dim: usize) -> Error {
    Error::Compatibility(format!(
        "SEN embedding dim {} vs generator condition dim {cond_dim}",
        sen.config.embed_dim
    ))
}

pub fn train_rdg(roots: &Roots, a: TrainRdgArgs) -> Result<()> {
    let mut cfg = load_config(&a.run.config)?;
    for name in &a.ablate {
        cfg.rdg.flags = cfg.rdg.flags.ablate(name)?;
    }
    cfg.validate()?;
    let use_sen = cfg.rdg.flags.use_sen_embeddings;
    let sen = match (&a.sen, use_sen) {
        (Some(p), true) => {
            let (model, frontend) = SenModel::load(p)?;
            if frontend != cfg.frontend {
                return Err(Error::Compatibility(format!(
                    "{} was trained with a different audio front end than this configuration",
                    p.display()
                )));
            }
            Some((model, file_hash(p)?))
        }
        (None, true) => return Err(Error::Config("--sen is required unless --ablate no-sen is given".into())),
        (_, false) => None,
    };
    let manifest = manifest_path(roots, &cfg)?;
    let dir = open_run(roots, &a.run, &cfg)?;
    let ckpt = dir.checkpoint("rdg");
    if a.run.resume && ckpt.exists() {
        if let Some((s, _)) = &sen {
            let cond_dim: usize = load_checkpoint(&ckpt)?
                .meta("cond_dim")?
                .parse()
                .map_err(|_| Error::Checkpoint("malformed cond_dim".into()))?;
            if cond_dim != s.config.embed_dim {
                return Err(dims_mismatch(s, cond_dim));
            }
        }
    }
    let corpus = Corpus::load(load_manifest(&manifest)?, &cfg.frontend, cfg.rdg.augment)?;
    let mut extra = config_echo(&cfg)?;
    extra.insert("frontend".into(), serde_json::to_string(&cfg.frontend)?);
    extra.insert(
        "sen_checkpoint_sha256".into(),
        sen.as_ref().map_or_else(|| "none".to_string(), |(_, h)| h.clone()),
    );
    let opts = RdgTrainOptions {
        seed: cfg.seed,
        checkpoint_path: Some(ckpt.clone()),
        history_path: Some(dir.history("rdg")),
        samples_dir: Some(dir.samples_dir()),
        resume: a.run.resume,
        stop_after_epochs: None,
        extra_metadata: extra,
    };
    let out = fit_rdg(&corpus, sen.as_ref().map(|(m, _)| m), &cfg.rdg, &opts)?;
    println!("experiment: {}", dir.root().display());
    println!("checkpoint: {}", ckpt.display());
    println!("epochs: {}", out.epochs_completed);
    if let Some(r) = out.history.last() {
        println!("last step {}: L_G {:.4} L_D0 {:.4} L_RS {:.4} kl {:.4}", r.step, r.l_g, r.l_d[0], r.l_rs, r.kl);
    }
    Ok(())
}

/// Output stem for an utterance: keeps a leading `c<class>_` so evaluation can read the class.
fn output_stem(audio: &Path, class: Option<usize>) -> String {
    let stem = audio.file_stem().and_then(|s| s.to_str()).unwrap_or("utterance").to_string();
    match class {
        Some(c) if class_from_name(&stem) != Some(c) => format!("c{c:03}_{stem}"),
        _ => stem,
    }
}

pub fn generate(roots: &Roots, a: GenerateArgs) -> Result<()> {
    let (model, ck) = RdgModel::load(&a.rdg)?;
    let sen = a.sen.as_deref().map(SenModel::load).transpose()?;
    if model.config.flags.use_sen_embeddings {
        let (s, _) = sen
            .as_ref()
            .ok_or_else(|| Error::Config("this generator was trained on speech embeddings; pass --sen".into()))?;
        if s.config.embed_dim != model.cond_dim {
            return Err(dims_mismatch(s, model.cond_dim));
        }
        if ck.meta("sen_fingerprint")? != s.params().content_hash(&[])? {
            return Err(Error::Compatibility(
                "the SEN checkpoint is not the one this generator was trained against".into(),
            ));
        }
    }
    let frontend: FrontendConfig = match (&sen, ck.meta("frontend")) {
        (Some((_, fe)), _) => fe.clone(),
        (None, Ok(json)) => serde_json::from_str(json)?,
        (None, Err(_)) => FrontendConfig::default(),
    };

    let inputs: Vec<(PathBuf, Option<usize>)> = match &a.manifest {
        Some(m) => {
            let split = parse_split(&a.split)?;
            load_manifest(&roots.data_path(m))?
                .split(split)
                .map(|e| (e.audio_path.clone(), Some(e.class_id)))
                .collect()
        }
        None => a.audio.iter().map(|p| (roots.data_path(p), None)).collect(),
    };
    if inputs.is_empty() {
        return Err(Error::Validation("no utterances selected".into()));
    }

    let extractor = LogMelExtractor::new(frontend.clone())?;
    let mut specs: Vec<Spectrogram> = Vec::new();
    let mut names = Vec::new();
    let mut last_err = None;
    for (path, class) in &inputs {
        match read_wav(path, frontend.sample_rate_hz).and_then(|w| extractor.compute(&w)) {
            Ok(s) => {
                specs.push(s);
                names.push(output_stem(path, *class));
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                last_err = Some(e);
            }
        }
    }
    if specs.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::Validation("no readable audio".into())));
    }

    let refs: Vec<&Spectrogram> = specs.iter().collect();
    let floor = frontend.log_floor.ln() as f32;
    let cond = spectrogram_conditions(&model, sen.as_ref().map(|(m, _)| m), &refs, floor)?;
    let images = generate_pyramids(&model, &cond, a.per_caption, a.seed)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut written = 0;
    for (i, name) in names.iter().enumerate() {
        for k in 0..a.per_caption {
            let stem = if a.per_caption == 1 { name.clone() } else { format!("{name}_{k}") };
            let pyramid = &images[i * a.per_caption + k];
            if a.all_scales {
                for img in pyramid {
                    img.save_png(&a.out.join(format!("{stem}_{}px.png", img.size())))?;
                    written += 1;
                }
            } else {
                pyramid.last().expect("non-empty pyramid").save_png(&a.out.join(format!("{stem}.png")))?;
                written += 1;
            }
        }
    }
    let record = serde_json::json!({
        "rdg_checkpoint": a.rdg,
        "rdg_sha256": file_hash(&a.rdg)?,
        "sen_sha256": a.sen.as_deref().map(file_hash).transpose()?,
        "seed": a.seed,
        "per_caption": a.per_caption,
        "utterances": names.len(),
        "experiment_config": ck.meta("experiment_config").ok(),
    });
    write_text(&a.out.join("generation.json"), &serde_json::to_string_pretty(&record)?)?;
    println!("wrote {written} image(s) to {}", a.out.display());
    if names.len() < inputs.len() {
        println!("{} utterance(s) failed", inputs.len() - names.len());
    }
    Ok(())
}

enum Source {
    Cache(PathBuf),
    Dir(PathBuf),
    Manifest(PathBuf),
}

fn classify(path: PathBuf) -> Source {
    match path.extension().and_then(|e| e.to_str()) {
        _ if path.is_dir() => Source::Dir(path),
        Some("tsv") => Source::Manifest(path),
        _ => Source::Cache(path),
    }
}

pub fn evaluate(roots: &Roots, a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let settings = EvalSettings {
        splits: cfg.eval.splits,
        queries_per_class: cfg.eval.queries_per_class,
        query_seed: cfg.eval.query_seed,
    };
    let split = parse_split(&a.split)?;
    let real_src = classify(roots.data_path(&a.real));
    let fake_src = classify(a.fake.clone());
    if matches!(fake_src, Source::Manifest(_)) {
        return Err(Error::Config("--fake must be an image directory or a feature cache".into()));
    }
    let exp = a.exp_dir.as_deref().map(ExperimentDir::open).transpose()?;

    let corpus_manifest = match &real_src {
        Source::Manifest(p) => Some(p.clone()),
        _ => cfg.data.manifest.as_deref().map(|m| roots.data_path(m)),
    };
    let mut corpus: Option<Corpus> = None;
    let get_corpus = |corpus: &mut Option<Corpus>| -> Result<()> {
        if corpus.is_none() {
            let m = corpus_manifest
                .as_ref()
                .ok_or_else(|| Error::Config("need --backbone, or a manifest to train one on".into()))?;
            *corpus = Some(Corpus::load(load_manifest(m)?, &cfg.frontend, false)?);
        }
        Ok(())
    };

    let needs_backbone = !matches!((&real_src, &fake_src), (Source::Cache(_), Source::Cache(_)));
    let backbone = if !needs_backbone {
        None
    } else if let Some(p) = &a.backbone {
        Some(DeskClassifier::load(p)?)
    } else {
        get_corpus(&mut corpus)?;
        let (model, losses) = DeskClassifier::fit_corpus(cfg.eval.desk.clone(), corpus.as_ref().expect("loaded"), cfg.seed)?;
        eprintln!(
            "trained evaluation backbone: loss {:.4} -> {:.4}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        let save_to = a.save_backbone.clone().or_else(|| exp.as_ref().map(|d| d.checkpoint("eval_backbone")));
        if let Some(p) = save_to {
            model.save(&p, config_echo(&cfg)?)?;
        }
        Some(model)
    };

    let mut features = |src: &Source| -> Result<FeatureSet> {
        match src {
            Source::Cache(p) => FeatureSet::load(p),
            Source::Dir(d) => {
                let set = LabelledImages::load_dir(d)?;
                FeatureSet::compute(backbone.as_ref().expect("backbone"), &set.images, &set.classes)
            }
            Source::Manifest(_) => {
                get_corpus(&mut corpus)?;
                let b = backbone.as_ref().expect("backbone");
                let set = LabelledImages::from_corpus(corpus.as_ref().expect("loaded"), split, b.input_size())?;
                FeatureSet::compute(b, &set.images, &set.classes)
            }
        }
    };
    let real = features(&real_src)?;
    let fake = features(&fake_src)?;
    if let Some(dir) = &a.cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        real.save(&dir.join("real.safetensors"))?;
        fake.save(&dir.join("fake.safetensors"))?;
    }

    let provenance = backbone.as_ref().map_or(Provenance::DeskScaleTrained, |b| b.provenance());
    let mut report = score(&real, &fake, provenance, &settings)?;
    report.config = Some(cfg.to_toml()?);
    let json = report.to_json()?;
    let out = a.out.clone().or_else(|| exp.as_ref().map(|d| d.new_report_path("metrics")));
    if let Some(p) = &out {
        write_text(p, &json)?;
        eprintln!("report: {}", p.display());
    }
    println!("{json}");
    Ok(())
}
