//! Multi-stage audio-visual representation learning at desk scale.
//!
//! The pipeline pre-trains an audio Conformer and a video ViT with masked
//! autoencoding and/or an audio-visual contrastive objective, optionally
//! mid-trains the audio encoder on a speech-translation task, and then
//! fine-tunes small task heads on top of the frozen audio encoder.
//!
//! Modules follow the pipeline:
//!
//! - [`signal`]: waveform resampling, log-mel filterbank energies, framing.
//! - [`vision`]: clip preprocessing and space-time voxelization.
//! - [`nn`]: the differentiable core (tape, layers, optimizer, grad check).
//! - [`pretrain`]: masking, MAE and contrastive losses, the pre-training loop.
//! - [`midtrain`]: the translation decoder and mid-training loop.
//! - [`finetune`]: CTC, WER/PER, task heads and frozen-encoder fine-tuning.
//! - [`data`]: synthetic corpora and WAV ingestion.
//! - [`orchestrator`]: configuration, checkpoints, the experiment grid.

pub mod data;
pub mod error;
pub mod finetune;
pub mod midtrain;
pub mod nn;
pub mod orchestrator;
pub mod pretrain;
pub mod seed;
pub mod signal;
pub mod vision;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/midtraining.md")]
    mod midtraining {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    mod finetuning {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
