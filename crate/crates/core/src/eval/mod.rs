//! Inception Score, Fréchet distance and retrieval mAP over a pluggable backbone.

pub mod backbone;
pub mod metrics;
pub mod report;

pub use backbone::{extract, DeskClassifier, DeskClassifierConfig, EvalBackbone, Provenance, BACKBONE_CHECKPOINT_KIND};
pub use metrics::{average_precision, choose_queries, fid, inception_score, rank_gallery, retrieval_map};
pub use report::{class_from_name, evaluate, BackboneStamp, EvalSettings, FeatureSet, LabelledImages, MetricReport};
