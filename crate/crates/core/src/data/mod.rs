//! Corpus ingestion: manifests, audio front end, image scales, synthetic data
//! and class-aware relation sampling.

pub mod audio;
pub mod dataset;
pub mod frontend;
pub mod images;
pub mod manifest;
pub mod relation;
pub mod synth;

pub use dataset::{pad_spectrograms, Corpus, PairedSample, SpeechBatch, PYRAMID_SCALES};
pub use frontend::{compute_log_mel, FrontendConfig, LogMelExtractor, MelFilterbank, Spectrogram};
pub use images::{ImageArray, ScaledImage};
pub use manifest::{load_manifest, Manifest, ManifestEntry, Split};
pub use relation::{sample_relation_batch, RelationSampler, RelationSamplingBatch};
pub use synth::{corpus_hash, make_synthetic_corpus, SyntheticCorpusSpec};
