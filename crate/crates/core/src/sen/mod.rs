//! Speech embedding network: image and speech encoders into one space,
//! trained with masked matching and class-distinctive objectives.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    distinctive_loss, distinctive_loss_tensor, matching_loss, matching_loss_tensor, matching_mask, sen_total_loss,
    similarity_matrix, DistinctiveLoss, EmbeddingBatch, MatchingLoss,
};
pub use model::{ImageEncoder, SenConfig, SenModel, SpeechEncoder, SEN_CHECKPOINT_KIND};
pub use train::{
    retrieval_recall_at_1, spectrogram_embeddings, speech_embeddings, image_embeddings, train_sen, write_sen_history, SenHistoryRow,
    SenTrainOptions, SenTrainOutcome,
};
