//! Frozen-encoder downstream fine-tuning and evaluation.

mod ctc;
mod metrics;
mod run;

pub use ctc::{ctc_batch, ctc_greedy, ctc_loss, ctc_loss_grad, min_frames};
pub use metrics::{edit_distance, per, wer, ErrorCounts};
pub use run::*;
