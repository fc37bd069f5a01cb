use s2ig_core::data::{load_manifest, make_synthetic_corpus, Corpus, FrontendConfig, Split, SyntheticCorpusSpec};
use s2ig_core::sen::{retrieval_recall_at_1, train_sen, SenConfig, SenModel, SenTrainOptions};

fn corpus(dir: &std::path::Path) -> Corpus {
    let spec = SyntheticCorpusSpec {
        seed: 7,
        num_classes: 8,
        images_per_class: 10,
    };
    let manifest = make_synthetic_corpus(&spec, dir).unwrap();
    Corpus::load(load_manifest(&manifest).unwrap(), &FrontendConfig::default(), false).unwrap()
}

#[test]
fn toy_training_reduces_loss_and_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let t0 = std::time::Instant::now();
    let out = train_sen(&corpus, &SenConfig::ci(), &SenTrainOptions { seed: 1, ..Default::default() }).unwrap();
    let (first, last) = out.first_and_last_epoch_loss().unwrap();
    let recall = retrieval_recall_at_1(&out.model, &corpus, Split::Test).unwrap();
    eprintln!("sen: {first:.3} -> {last:.3}, recall@1 {recall:.3}, {:?}", t0.elapsed());
    assert!(last < 0.25 * first);
    assert!(recall > 3.0 / 8.0);
}

#[test]
fn untrained_encoders_retrieve_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let mut total = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        let model = SenModel::new(SenConfig::ci(), 8, 40, seed).unwrap();
        total += retrieval_recall_at_1(&model, &corpus, Split::Test).unwrap();
    }
    let mean = total / seeds as f64;
    eprintln!("untrained recall@1 {mean:.3}");
    assert!(mean < 3.0 / 8.0);
}
