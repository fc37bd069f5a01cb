//! Relation-supervised densely-stacked generator and its adversarial training.

pub mod ca;
pub mod config;
pub mod discriminator;
pub mod generator;
pub mod infer;
pub mod loss;
pub mod model;
pub mod relation;
pub mod train;

pub use ca::{kl_divergence, ConditioningAugmentation, ConditioningCode, Mode};
pub use config::{AblationFlags, RdgConfig};
pub use discriminator::{Discriminator, DiscriminatorOutput};
pub use generator::{Generator, ImagePyramid};
pub use infer::{generate_pyramids, spectrogram_conditions};
pub use loss::{
    discriminator_loss, generator_adversarial_loss, generator_loss, relation_real_terms, relation_supervisor_loss, GeneratorLoss, RelationLoss, RelationSet, EPS,
};
pub use model::{RdgModel, DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES, RDG_CHECKPOINT_KIND};
pub use relation::{RelationLabel, RelationSupervisor};
pub use train::{corpus_conditions, discriminator_phase, generate_final_images, generator_phase, optimizers, DiscriminatorPhase, sample_grid, train_rdg, train_rdg_with, write_rdg_history, RdgHistoryRow, RdgTrainOptions, RdgTrainOutcome};
