//! Pre-training: masking, masked autoencoding through a shared decoder,
//! pooled audio-video contrastive learning, and their equal-weight sum.

mod clr;
mod mask;
mod model;
mod run;

pub use clr::{clr_graph, clr_loss, clr_loss_from_similarity, retrieval_accuracy, ClrMode};
pub use mask::{mask_count, sample_mask, MaskSpec};
pub use model::{
    check_same_layout, AudioConfig, AudioEncoder, AvBatch, BatchMasks, ClrOutput, CommonDecoder, LossOptions,
    LossParts, MaeOutput, MaeScope, ModelConfig, Objective, PretrainModel, TARGET_EPS,
};
pub use run::{
    batch_indices, pretrain_dataset, pretrain_run, retrieval_eval, PretrainConfig, PretrainOutcome, StepLoss,
};

/// Equal-weight combination of the two pre-training losses.
pub fn combined_loss(l_mae: f64, l_clr: f64) -> f64 {
    (l_mae + l_clr) / 2.0
}
